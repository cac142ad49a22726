//! STFT analysis and the multi-resolution spectral reconstruction loss.

pub mod fft;
pub mod loss;
pub mod stft;

pub use fft::{fft, fft_real, ifft};
pub use loss::{multi_res_stft_loss, stft_loss, MultiResConfig, LOG_FLOOR};
pub use stft::{hann_window, magnitude, StftConfig};
