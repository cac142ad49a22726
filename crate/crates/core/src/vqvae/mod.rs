//! Non-autoregressive GAN-based VQ-VAE: strided-conv encoder, transposed-conv
//! decoder, learned codebook, and a small ensemble of multi-scale waveform
//! discriminators trained with the LSGAN objective.

mod losses;
mod nets;
mod train;

pub use losses::{discriminator_loss, generator_loss, vq_losses, GeneratorLossVars};
pub use train::{crop_batch, LossReport, VqVaeTrainer};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};
use nets::{Decoder, Discriminator, Encoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqVaeConfig {
    pub num_centroids: usize,
    pub codebook_dim: usize,
    pub downsampling_scales: Vec<usize>,
    pub upsampling_scales: Vec<usize>,
    /// Encoder channel width after each downsampling stage.
    pub encoder_channels: Vec<usize>,
    /// Decoder channel width after each upsampling stage.
    pub decoder_channels: Vec<usize>,
    pub num_discriminators: usize,
    /// Discriminator channel widths; the layer count L is this length + 1
    /// (a final 1-channel projection).
    pub disc_channels: Vec<usize>,
    pub batch_length: usize,
}

impl Default for VqVaeConfig {
    /// Desk-scale DSF128 setup; centroid count matches the reference
    /// configuration, widths are reduced.
    fn default() -> Self {
        VqVaeConfig {
            num_centroids: 256,
            codebook_dim: 64,
            downsampling_scales: vec![4, 4, 4, 2],
            upsampling_scales: vec![8, 4, 2, 2],
            encoder_channels: vec![16, 32, 32, 64],
            decoder_channels: vec![32, 32, 16, 16],
            num_discriminators: 3,
            disc_channels: vec![16, 32, 32],
            batch_length: 8192,
        }
    }
}

impl VqVaeConfig {
    pub fn dsf(&self) -> usize {
        self.downsampling_scales.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let down: usize = self.downsampling_scales.iter().product();
        let up: usize = self.upsampling_scales.iter().product();
        if down != up {
            return Err(Error::Config {
                field: "vqvae.upsampling_scales".into(),
                message: format!(
                    "product {up} must equal product of vqvae.downsampling_scales {down}"
                ),
            });
        }
        if self.encoder_channels.len() != self.downsampling_scales.len() {
            return Err(Error::Config {
                field: "vqvae.encoder_channels".into(),
                message: format!(
                    "need one width per stage of vqvae.downsampling_scales ({} vs {})",
                    self.encoder_channels.len(),
                    self.downsampling_scales.len()
                ),
            });
        }
        if self.decoder_channels.len() != self.upsampling_scales.len() {
            return Err(Error::Config {
                field: "vqvae.decoder_channels".into(),
                message: format!(
                    "need one width per stage of vqvae.upsampling_scales ({} vs {})",
                    self.decoder_channels.len(),
                    self.upsampling_scales.len()
                ),
            });
        }
        for &s in self.downsampling_scales.iter().chain(&self.upsampling_scales) {
            if s < 2 || s % 2 != 0 {
                return Err(Error::Config {
                    field: "vqvae.scales".into(),
                    message: format!("scale {s} must be even and >= 2"),
                });
            }
        }
        if self.batch_length % self.dsf() != 0 {
            return Err(Error::Config {
                field: "vqvae.batch_length".into(),
                message: format!(
                    "{} must be a multiple of the downsampling factor {}",
                    self.batch_length,
                    self.dsf()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cm: f64,
    pub lambda_fm: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cm: 0.25, lambda_fm: 25.0, lambda_adv: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss_weights.lambda_cm", self.lambda_cm),
            ("loss_weights.lambda_fm", self.lambda_fm),
            ("loss_weights.lambda_adv", self.lambda_adv),
        ] {
            if v < 0.0 {
                return Err(Error::Config {
                    field: name.into(),
                    message: format!("{v} must be nonnegative"),
                });
            }
        }
        Ok(())
    }
}

/// Discrete VQ ids for one waveform, plus the pre-padding sample count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub source_length: usize,
}

pub struct VqVae {
    pub cfg: VqVaeConfig,
    /// Generator parameters: encoder, decoder, codebook.
    pub gen_store: ParamStore,
    /// Discriminator parameters, updated by their own optimizer.
    pub disc_store: ParamStore,
    pub codebook: ParamId,
    pub steps_trained: usize,
    encoder: Encoder,
    decoder: Decoder,
    discriminators: Vec<Discriminator>,
}

impl VqVae {
    pub fn new(cfg: VqVaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen_store = ParamStore::new();
        let encoder = Encoder::new(&mut gen_store, &cfg, &mut rng);
        let decoder = Decoder::new(&mut gen_store, &cfg, &mut rng);
        let codebook = gen_store.add(
            "codebook",
            init_codebook(cfg.num_centroids, cfg.codebook_dim, &mut rng),
        );
        let mut disc_store = ParamStore::new();
        let discriminators = (0..cfg.num_discriminators)
            .map(|k| Discriminator::new(&mut disc_store, &cfg, k, &mut rng))
            .collect();
        Ok(VqVae {
            cfg,
            gen_store,
            disc_store,
            codebook,
            steps_trained: 0,
            encoder,
            decoder,
            discriminators,
        })
    }

    /// Encode a [1, T] var into [N, dim] latents; T must be a DSF multiple.
    pub fn encode_var(&self, tape: &mut Tape, x: Var) -> Var {
        self.encoder.forward(tape, &self.gen_store, x)
    }

    /// Decode [N, dim] latents into a [1, T] waveform var, T = N * DSF.
    pub fn decode_var(&self, tape: &mut Tape, z: Var) -> Var {
        self.decoder.forward(tape, &self.gen_store, z)
    }

    /// Discriminator forward at scale `k` (input average-pooled 2^k times);
    /// returns all layer outputs, last entry is the decision signal.
    pub fn discriminate_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        k: usize,
        x: Var,
    ) -> Vec<Var> {
        let mut scaled = x;
        for _ in 0..k {
            scaled = tape.avg_pool1d(scaled, 2);
        }
        self.discriminators[k].forward(tape, store, scaled)
    }

    pub fn num_discriminators(&self) -> usize {
        self.discriminators.len()
    }

    /// Deterministic encoder forward over a raw signal: pads with zeros to
    /// a DSF multiple and returns the [N, dim] latents.
    pub fn encode_signal(&self, x: &[f64]) -> Result<Tensor> {
        if x.is_empty() {
            return Err(Error::EmptyInput("encode"));
        }
        let padded = self.pad_to_dsf(x);
        let mut tape = Tape::new();
        let xv = tape.constant(vec![1, padded.len()], padded);
        let z = self.encode_var(&mut tape, xv);
        Ok(Tensor::new(tape.shape(z).to_vec(), tape.value(z).to_vec()))
    }

    pub fn pad_to_dsf(&self, x: &[f64]) -> Vec<f64> {
        let dsf = self.cfg.dsf();
        let padded_len = x.len().div_ceil(dsf) * dsf;
        let mut padded = x.to_vec();
        padded.resize(padded_len, 0.0);
        padded
    }

    /// Nearest-centroid ids for [N, dim] latents; ties break to the lowest
    /// index.
    pub fn quantize(&self, z: &Tensor) -> (Vec<usize>, Tensor) {
        let dim = self.cfg.codebook_dim;
        assert_eq!(z.shape.len(), 2);
        assert_eq!(z.shape[1], dim, "latent dim {} vs codebook dim {dim}", z.shape[1]);
        let centroids = &self.gen_store.get(self.codebook).data;
        let ids: Vec<usize> = z
            .data
            .chunks(dim)
            .map(|row| nearest_centroid(row, centroids, self.cfg.num_centroids, dim))
            .collect();
        let mut vq = Vec::with_capacity(ids.len() * dim);
        for &id in &ids {
            vq.extend_from_slice(&centroids[id * dim..(id + 1) * dim]);
        }
        (ids, Tensor::new(vec![z.shape[0], dim], vq))
    }

    /// Full tokenizer path: encode, quantize, keep the original length.
    pub fn tokenize(&self, x: &[f64]) -> Result<TokenSequence> {
        if self.steps_trained == 0 {
            return Err(Error::Checkpoint("refusing to tokenize with an untrained model".into()));
        }
        let z = self.encode_signal(x)?;
        let (ids, _) = self.quantize(&z);
        Ok(TokenSequence { ids, source_length: x.len() })
    }

    pub fn tokenize_corpus(&self, waveforms: &[Vec<f64>]) -> Result<Vec<TokenSequence>> {
        waveforms.iter().map(|w| self.tokenize(w)).collect()
    }

    /// Decode token ids back to a waveform of length ids.len() * DSF.
    pub fn decode_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::EmptyDecodeOutput);
        }
        let mut tape = Tape::new();
        let cb = tape.constant_from(self.gen_store.get(self.codebook));
        let z_vq = tape.embedding(cb, ids);
        let y = self.decode_var(&mut tape, z_vq);
        Ok(tape.value(y).to_vec())
    }

    /// Reconstruction used by round-trip tests: decode(quantize(encode(x))).
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.encode_signal(x)?;
        let (ids, _) = self.quantize(&z);
        self.decode_ids(&ids)
    }

    /// Codebook usage histogram over a token corpus.
    pub fn usage_histogram(&self, seqs: &[TokenSequence]) -> Vec<usize> {
        let mut hist = vec![0usize; self.cfg.num_centroids];
        for s in seqs {
            for &id in &s.ids {
                hist[id] += 1;
            }
        }
        hist
    }
}

fn init_codebook<R: Rng>(num: usize, dim: usize, rng: &mut R) -> Tensor {
    // Rows drawn from N(0, 1/sqrt(dim)); regenerate on the (measure-zero)
    // chance of duplicate rows so ties cannot exist at init.
    loop {
        let t = Tensor::randn(vec![num, dim], 1.0 / (dim as f64).sqrt(), rng);
        let mut distinct = true;
        'outer: for i in 0..num {
            for j in (i + 1)..num {
                if t.data[i * dim..(i + 1) * dim] == t.data[j * dim..(j + 1) * dim] {
                    distinct = false;
                    break 'outer;
                }
            }
        }
        if distinct {
            return t;
        }
    }
}

/// Exhaustive nearest-neighbor scan with strict-less comparison, so equal
/// distances keep the earliest (lowest) index.
pub fn nearest_centroid(row: &[f64], centroids: &[f64], num: usize, dim: usize) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for j in 0..num {
        let c = &centroids[j * dim..(j + 1) * dim];
        let mut d = 0.0;
        for (a, b) in row.iter().zip(c) {
            let diff = a - b;
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> VqVaeConfig {
        VqVaeConfig {
            num_centroids: 16,
            codebook_dim: 8,
            downsampling_scales: vec![4, 4],
            upsampling_scales: vec![4, 4],
            encoder_channels: vec![8, 8],
            decoder_channels: vec![8, 8],
            num_discriminators: 2,
            disc_channels: vec![4, 8],
            batch_length: 256,
        }
    }

    #[test]
    fn encode_length_contract() {
        let model = VqVae::new(small_cfg(), 1).unwrap();
        let x = vec![0.25; 256];
        let z = model.encode_signal(&x).unwrap();
        assert_eq!(z.shape, vec![16, 8]);

        // Non-multiple lengths are padded up.
        let x = vec![0.25; 250];
        let z = model.encode_signal(&x).unwrap();
        assert_eq!(z.shape, vec![16, 8]);
    }

    #[test]
    fn default_config_matches_reference_dsf() {
        let cfg = VqVaeConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.dsf(), 128);
        assert_eq!(cfg.num_centroids, 256);
        // T=8192 at DSF128 gives 64 tokens; the DSF256 variant gives 32.
        assert_eq!(8192 / cfg.dsf(), 64);
        let dsf256 = VqVaeConfig {
            downsampling_scales: vec![4, 4, 4, 4],
            upsampling_scales: vec![8, 8, 2, 2],
            ..cfg
        };
        dsf256.validate().unwrap();
        assert_eq!(8192 / dsf256.dsf(), 32);
    }

    #[test]
    fn encode_is_deterministic() {
        let model = VqVae::new(small_cfg(), 2).unwrap();
        let x: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin() * 0.5).collect();
        let a = model.encode_signal(&x).unwrap();
        let b = model.encode_signal(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantize_exact_centroid_and_tie_break() {
        let model = VqVae::new(small_cfg(), 3).unwrap();
        let dim = model.cfg.codebook_dim;
        let centroids = model.gen_store.get(model.codebook).data.clone();
        // z equal to centroid 5 exactly.
        let z = Tensor::new(vec![1, dim], centroids[5 * dim..6 * dim].to_vec());
        let (ids, z_vq) = model.quantize(&z);
        assert_eq!(ids, vec![5]);
        assert_eq!(z_vq.data, z.data);

        // Equidistant point between two centroids resolves to the lower
        // index: centroids 2 and 7 at (1,0,...) and (-1,0,...).
        let mut c = vec![0.0; 16 * 2];
        c[2 * 2] = 1.0;
        c[7 * 2] = -1.0;
        for (j, v) in c.iter_mut().enumerate() {
            // Push all other centroids far away.
            if j / 2 != 2 && j / 2 != 7 && j % 2 == 1 {
                *v = 100.0;
            }
        }
        let id = nearest_centroid(&[0.0, 0.0], &c, 16, 2);
        assert_eq!(id, 2, "equidistant ties must resolve to the lowest index");
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let model = VqVae::new(small_cfg(), 4).unwrap();
        let dim = model.cfg.codebook_dim;
        let num = model.cfg.num_centroids;
        let centroids = model.gen_store.get(model.codebook).data.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let data: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = Tensor::new(vec![n, dim], data.clone());
        let (ids, _) = model.quantize(&z);
        for (row_idx, row) in data.chunks(dim).enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..num {
                let d: f64 = row
                    .iter()
                    .zip(&centroids[j * dim..(j + 1) * dim])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(ids[row_idx], best);
        }
    }

    #[test]
    fn decode_stays_inside_unit_interval() {
        let model = VqVae::new(small_cfg(), 6).unwrap();
        let ids: Vec<usize> = (0..16).map(|i| i % 16).collect();
        let y = model.decode_ids(&ids).unwrap();
        assert_eq!(y.len(), 16 * model.cfg.dsf());
        assert!(y.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn decode_of_lookup_bitwise_equals_reconstruction() {
        let mut model = VqVae::new(small_cfg(), 7).unwrap();
        model.steps_trained = 1;
        let x: Vec<f64> = (0..512).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let tokens = model.tokenize(&x).unwrap();
        assert!(tokens.ids.iter().all(|&id| id < model.cfg.num_centroids));
        let via_ids = model.decode_ids(&tokens.ids).unwrap();
        let via_pipeline = model.reconstruct(&x).unwrap();
        assert_eq!(via_ids, via_pipeline);
    }

    #[test]
    fn untrained_model_refuses_to_tokenize() {
        let model = VqVae::new(small_cfg(), 8).unwrap();
        assert!(model.tokenize(&vec![0.1; 256]).is_err());
    }
}
