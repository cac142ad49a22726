//! Pipeline configuration: one TOML file covering every stage, with desk-
//! scale defaults so an empty file is a runnable demo setup.

use crate::corpus::SyntheticCorpusSpec;
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::nmt::NmtConfig;
use crate::signal::MultiResConfig;
use crate::vqvae::{LossWeights, VqVaeConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: SyntheticCorpusSpec,
    pub vqvae: VqVaeSection,
    pub subword: SubwordSection,
    pub nmt: NmtSection,
    pub lm: LmSection,
    pub decode: DecodeSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VqVaeSection {
    pub train_steps: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub model: VqVaeConfig,
    pub weights: LossWeights,
    pub stft: MultiResConfig,
}

impl Default for VqVaeSection {
    fn default() -> Self {
        VqVaeSection {
            train_steps: 500,
            g_lr: 1e-4,
            d_lr: 5e-5,
            model: VqVaeConfig::default(),
            weights: LossWeights::default(),
            stft: MultiResConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SubwordSection {
    /// Must equal the VQ-VAE codebook size; the tokenizer's base symbols are
    /// centroid indices.
    pub base_alphabet: usize,
    pub vocab_size: usize,
}

impl Default for SubwordSection {
    fn default() -> Self {
        SubwordSection { base_alphabet: 256, vocab_size: 512 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NmtSection {
    pub epochs: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ff_units: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub batch_token_budget: usize,
}

impl Default for NmtSection {
    fn default() -> Self {
        let d = NmtConfig::desk(1, 4);
        NmtSection {
            epochs: 300,
            encoder_blocks: d.encoder_blocks,
            decoder_blocks: d.decoder_blocks,
            ff_units: d.ff_units,
            attn_dim: d.attn_dim,
            heads: d.heads,
            dropout: d.dropout,
            label_smoothing: d.label_smoothing,
            warmup_steps: d.warmup_steps,
            grad_clip: d.grad_clip,
            batch_token_budget: d.batch_token_budget,
        }
    }
}

impl NmtSection {
    /// Vocab sizes come from upstream artifacts (corpus alphabet, learned
    /// subword model), not the config file.
    pub fn to_config(&self, src_vocab: usize, tgt_vocab: usize) -> NmtConfig {
        NmtConfig {
            src_vocab,
            tgt_vocab,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            ff_units: self.ff_units,
            attn_dim: self.attn_dim,
            heads: self.heads,
            dropout: self.dropout,
            label_smoothing: self.label_smoothing,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
            batch_token_budget: self.batch_token_budget,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub epochs: usize,
    pub hidden_units: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub warmup_steps: usize,
    pub grad_clip: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        let d = LmConfig::desk(4);
        LmSection {
            epochs: 30,
            hidden_units: d.hidden_units,
            num_layers: d.num_layers,
            embed_dim: d.embed_dim,
            warmup_steps: d.warmup_steps,
            grad_clip: d.grad_clip,
        }
    }
}

impl LmSection {
    pub fn to_config(&self, vocab: usize) -> LmConfig {
        LmConfig {
            vocab,
            hidden_units: self.hidden_units,
            num_layers: self.num_layers,
            embed_dim: self.embed_dim,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam_size: usize,
    pub lm_weight: f64,
    pub max_length: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { beam_size: 5, lm_weight: 0.0, max_length: 64 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| Error::Config {
            field: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.vqvae.model.validate()?;
        self.vqvae.weights.validate()?;
        if self.vqvae.train_steps == 0 {
            return Err(Error::Config {
                field: "vqvae.train_steps".into(),
                message: "must be positive".into(),
            });
        }
        if self.vqvae.g_lr <= 0.0 || self.vqvae.d_lr <= 0.0 {
            return Err(Error::Config {
                field: "vqvae.g_lr".into(),
                message: "learning rates must be positive".into(),
            });
        }
        if self.subword.base_alphabet != self.vqvae.model.num_centroids {
            return Err(Error::Config {
                field: "subword.base_alphabet".into(),
                message: format!(
                    "{} does not match vqvae.model.num_centroids = {}",
                    self.subword.base_alphabet, self.vqvae.model.num_centroids
                ),
            });
        }
        if self.subword.vocab_size < self.subword.base_alphabet {
            return Err(Error::VocabTooSmall {
                requested: self.subword.vocab_size,
                base: self.subword.base_alphabet,
            });
        }
        // Vocab fields of the NMT/LM configs are filled from the corpus and
        // subword artifacts later; validate the rest with placeholders.
        self.nmt.to_config(1, 4).validate()?;
        self.lm.to_config(4).validate()?;
        if self.decode.beam_size == 0 || self.decode.max_length == 0 {
            return Err(Error::Config {
                field: "decode".into(),
                message: "beam_size and max_length must be positive".into(),
            });
        }
        if self.decode.lm_weight < 0.0 {
            return Err(Error::Config {
                field: "decode.lm_weight".into(),
                message: "must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// Full-scale setup: 256-centroid codebook, 512-unit subword vocabulary,
    /// 6+6-block translation model and a 1024-unit fusion LM. Training
    /// schedules at this scale are far beyond the demo corpus; this preset
    /// documents the target hyperparameters.
    pub fn reference() -> Self {
        let nmt_ref = NmtConfig::reference(1, 4);
        let lm_ref = LmConfig::reference(4, 2);
        PipelineConfig {
            vqvae: VqVaeSection { train_steps: 400_000, ..VqVaeSection::default() },
            subword: SubwordSection { base_alphabet: 256, vocab_size: 512 },
            nmt: NmtSection {
                epochs: 100,
                encoder_blocks: nmt_ref.encoder_blocks,
                decoder_blocks: nmt_ref.decoder_blocks,
                ff_units: nmt_ref.ff_units,
                attn_dim: nmt_ref.attn_dim,
                heads: nmt_ref.heads,
                dropout: nmt_ref.dropout,
                label_smoothing: nmt_ref.label_smoothing,
                warmup_steps: nmt_ref.warmup_steps,
                grad_clip: nmt_ref.grad_clip,
                batch_token_budget: 4096,
            },
            lm: LmSection {
                epochs: 30,
                hidden_units: lm_ref.hidden_units,
                num_layers: lm_ref.num_layers,
                embed_dim: lm_ref.embed_dim,
                warmup_steps: lm_ref.warmup_steps,
                grad_clip: lm_ref.grad_clip,
            },
            decode: DecodeSection { beam_size: 5, lm_weight: 0.3, max_length: 256 },
            ..PipelineConfig::default()
        }
    }

    /// Demo setup used by the end-to-end tests: a small codebook and short
    /// training schedules so the whole pipeline runs in minutes.
    pub fn desk_demo() -> Self {
        PipelineConfig {
            seed: 42,
            vqvae: VqVaeSection {
                // Larger steps/lr than the reference setup: the demo corpus
                // is tiny and the whole run has to finish in minutes.
                train_steps: 3000,
                g_lr: 1e-3,
                model: VqVaeConfig {
                    num_centroids: 32,
                    codebook_dim: 16,
                    downsampling_scales: vec![4, 4, 4, 2],
                    upsampling_scales: vec![8, 4, 2, 2],
                    encoder_channels: vec![8, 16, 16, 32],
                    decoder_channels: vec![16, 16, 8, 8],
                    num_discriminators: 2,
                    disc_channels: vec![8, 16],
                    batch_length: 8192,
                },
                ..VqVaeSection::default()
            },
            subword: SubwordSection { base_alphabet: 32, vocab_size: 64 },
            ..PipelineConfig::default()
        }
    }
}
