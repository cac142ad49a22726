//! Alternating generator/discriminator updates.

use super::losses::{discriminator_loss, generator_loss};
use super::{LossWeights, VqVae};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, RAdam};
use crate::signal::MultiResConfig;
use crate::tape::Tape;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_rec: f64,
    pub l_cb: f64,
    pub l_cm: f64,
    pub l_adv: f64,
    pub l_g: f64,
    pub l_d: f64,
}

pub struct VqVaeTrainer {
    pub model: VqVae,
    pub weights: LossWeights,
    pub stft_cfg: MultiResConfig,
    pub g_opt: RAdam,
    pub d_opt: RAdam,
    pub g_clip: f64,
    pub d_clip: f64,
    /// Steps each centroid has gone without an assignment; dead codes are
    /// restarted from live encoder outputs to fight codebook collapse.
    pub unused_steps: Vec<usize>,
}

/// Restart threshold: a centroid unused this many consecutive steps is
/// re-seeded from a current encoder output frame.
const DEAD_CODE_STEPS: usize = 25;

impl VqVaeTrainer {
    /// Reference training setup: RAdam at 1e-4 (G) / 5e-5 (D), gradient
    /// clip 10.0 (G) / 1.0 (D).
    pub fn new(model: VqVae, weights: LossWeights, stft_cfg: MultiResConfig) -> Self {
        let num = model.cfg.num_centroids;
        VqVaeTrainer {
            model,
            weights,
            stft_cfg,
            g_opt: RAdam::new(1e-4),
            d_opt: RAdam::new(5e-5),
            g_clip: 10.0,
            d_clip: 1.0,
            unused_steps: vec![0; num],
        }
    }

    /// Seed every centroid from an encoder output frame of `x` (evenly
    /// spaced), so the quantizer starts on the data manifold instead of at
    /// random, which at small scale collapses the codebook.
    fn init_codebook_from(&mut self, x: &[f64]) -> Result<()> {
        let z = self.model.encode_signal(x)?;
        let frames = z.shape[0];
        let dim = z.shape[1];
        let num = self.model.cfg.num_centroids;
        let cb = &mut self.model.gen_store.get_mut(self.model.codebook).data;
        for k in 0..num {
            let f = k * frames / num;
            for j in 0..dim {
                // tiny deterministic spread so coinciding frames stay distinct
                cb[k * dim + j] = z.data[f * dim + j] + 1e-4 * (k as f64 + 1.0) * (j as f64 + 1.0);
            }
        }
        Ok(())
    }

    /// Re-seed centroids that stayed unassigned for DEAD_CODE_STEPS from
    /// current encoder frames, cycling deterministically through the batch.
    fn restart_dead_codes(&mut self, ids: &[usize], x: &[f64]) -> Result<()> {
        let mut seen = vec![false; self.model.cfg.num_centroids];
        for &id in ids {
            seen[id] = true;
        }
        let mut dead = Vec::new();
        for (k, seen) in seen.iter().enumerate() {
            if *seen {
                self.unused_steps[k] = 0;
            } else {
                self.unused_steps[k] += 1;
                if self.unused_steps[k] >= DEAD_CODE_STEPS {
                    dead.push(k);
                }
            }
        }
        if dead.is_empty() {
            return Ok(());
        }
        let z = self.model.encode_signal(x)?;
        let frames = z.shape[0];
        let dim = z.shape[1];
        let cb = &mut self.model.gen_store.get_mut(self.model.codebook).data;
        for (i, k) in dead.into_iter().enumerate() {
            let f = (self.model.steps_trained + i * 7) % frames;
            cb[k * dim..(k + 1) * dim].copy_from_slice(&z.data[f * dim..(f + 1) * dim]);
            self.unused_steps[k] = 0;
        }
        Ok(())
    }

    /// One generator update followed by one discriminator update (the
    /// latter only when lambda_adv > 0).
    pub fn train_step(&mut self, x: &[f64]) -> Result<LossReport> {
        let step = self.model.steps_trained + 1;
        if self.model.steps_trained == 0 {
            self.init_codebook_from(x)?;
        }

        // Generator phase: discriminators participate frozen.
        let mut tape = Tape::new();
        let parts = generator_loss(&self.model, &mut tape, x, &self.weights, &self.stft_cfg)?;
        let l_g = tape.scalar_value(parts.total);
        if !l_g.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: format!("generator loss {l_g}") });
        }
        let report_rec = tape.scalar_value(parts.l_rec);
        let report_cb = tape.scalar_value(parts.l_cb);
        let report_cm = tape.scalar_value(parts.l_cm);
        let report_adv = parts.l_adv.map(|v| tape.scalar_value(v)).unwrap_or(0.0);
        let grads = tape.backward(parts.total);
        let mut g_grads = grads.param_grads(&self.model.gen_store);
        clip_grad_norm(&mut g_grads, self.g_clip);
        self.g_opt.step(&mut self.model.gen_store, &g_grads);
        self.restart_dead_codes(&parts.token_ids, x)?;

        // Discriminator phase on the updated generator's output, detached.
        let mut l_d = 0.0;
        if self.weights.lambda_adv > 0.0 {
            let fake = self.model.reconstruct(x)?;
            let mut tape = Tape::new();
            let loss = discriminator_loss(&self.model, &mut tape, x, &fake);
            l_d = tape.scalar_value(loss);
            if !l_d.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("discriminator loss {l_d}"),
                });
            }
            let grads = tape.backward(loss);
            let mut d_grads = grads.param_grads(&self.model.disc_store);
            clip_grad_norm(&mut d_grads, self.d_clip);
            self.d_opt.step(&mut self.model.disc_store, &d_grads);
        }

        self.model.steps_trained = step;
        Ok(LossReport {
            step,
            l_rec: report_rec,
            l_cb: report_cb,
            l_cm: report_cm,
            l_adv: report_adv,
            l_g,
            l_d,
        })
    }
}

/// Random fixed-length crop from a random utterance; shorter utterances are
/// zero-padded on the right.
pub fn crop_batch<R: Rng>(waveforms: &[Vec<f64>], batch_length: usize, rng: &mut R) -> Vec<f64> {
    assert!(!waveforms.is_empty(), "empty corpus");
    let utt = &waveforms[rng.gen_range(0..waveforms.len())];
    if utt.len() <= batch_length {
        let mut out = utt.clone();
        out.resize(batch_length, 0.0);
        out
    } else {
        let start = rng.gen_range(0..=utt.len() - batch_length);
        utt[start..start + batch_length].to_vec()
    }
}
