//! Two-stage text-to-speech at desk scale: a GAN-trained VQ-VAE maps
//! waveforms to discrete token sequences and back, and an autoregressive
//! Transformer maps text to those token sequences, decoded with beam search
//! and optional LM shallow fusion.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod lm;
pub mod nmt;
pub mod nn;
pub mod optim;
pub mod signal;
pub mod subword;
pub mod tape;
pub mod tensor;
pub mod vqvae;
pub mod wav;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
