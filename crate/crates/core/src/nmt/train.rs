//! Teacher-forced training with target-length dynamic batching.

use super::{label_smoothed_ce, NmtModel};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, noam_lr, Adam};
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub token_accuracy: f64,
    pub batches: usize,
    pub last_lr: f64,
}

pub struct NmtTrainer {
    pub model: NmtModel,
    pub opt: Adam,
    pub step: usize,
}

impl NmtTrainer {
    pub fn new(model: NmtModel) -> Self {
        NmtTrainer { model, opt: Adam::new(), step: 0 }
    }

    /// One pass over (source, target) pairs. Pairs are shuffled, then packed
    /// into batches by cumulative target length; each batch takes one
    /// optimizer step on the mean of its per-pair gradients, clipped, at the
    /// Noam rate for that step.
    pub fn train_epoch(
        &mut self,
        pairs: &[(Vec<usize>, Vec<usize>)],
        rng: &mut ChaCha8Rng,
    ) -> Result<EpochMetrics> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("training pairs"));
        }
        let cfg = &self.model.cfg;
        let (pad, eps, budget) = (cfg.pad_id(), cfg.label_smoothing, cfg.batch_token_budget);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(rng);

        let mut batches: Vec<Vec<usize>> = Vec::new();
        let mut current = Vec::new();
        let mut tokens = 0usize;
        for &i in &order {
            let len = pairs[i].1.len();
            if !current.is_empty() && tokens + len > budget {
                batches.push(std::mem::take(&mut current));
                tokens = 0;
            }
            current.push(i);
            tokens += len;
        }
        if !current.is_empty() {
            batches.push(current);
        }

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut total_tokens = 0usize;
        let mut last_lr = 0.0;
        let n_batches = batches.len();
        for batch in batches {
            let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.model.store.len()];
            let mut batch_loss = 0.0;
            for &i in &batch {
                let (src, tgt) = &pairs[i];
                let mut tape = Tape::new();
                let mut drop = Some(&mut *rng);
                let logits = self.model.forward_teacher_forced(&mut tape, src, tgt, &mut drop)?;
                let loss = label_smoothed_ce(&mut tape, logits, tgt, eps, pad)?;
                let loss_val = tape.scalar_value(loss);
                if !loss_val.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: self.step + 1,
                        detail: format!("nmt loss {loss_val}"),
                    });
                }
                batch_loss += loss_val;
                let vals = tape.value(logits);
                let v = self.model.cfg.tgt_vocab;
                for (row, &y) in tgt.iter().enumerate() {
                    if y == pad {
                        continue;
                    }
                    let r = &vals[row * v..(row + 1) * v];
                    let argmax = r
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    total_tokens += 1;
                    if argmax == y {
                        correct += 1;
                    }
                }
                let grads = tape.backward(loss);
                for (slot, g) in acc.iter_mut().zip(grads.param_grads(&self.model.store)) {
                    match (slot.as_mut(), g) {
                        (Some(a), Some(g)) => {
                            for (x, y) in a.iter_mut().zip(&g) {
                                *x += y;
                            }
                        }
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in acc.iter_mut().flatten() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
            clip_grad_norm(&mut acc, self.model.cfg.grad_clip);
            self.step += 1;
            last_lr = noam_lr(self.step, self.model.cfg.attn_dim, self.model.cfg.warmup_steps);
            self.opt.step(&mut self.model.store, &acc, last_lr);
            loss_sum += batch_loss * scale;
        }
        Ok(EpochMetrics {
            mean_loss: loss_sum / n_batches as f64,
            token_accuracy: correct as f64 / total_tokens as f64,
            batches: n_batches,
            last_lr,
        })
    }

    /// Mean label-smoothed loss over held-out pairs, dropout disabled.
    pub fn eval_loss(&self, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("eval pairs"));
        }
        let cfg = &self.model.cfg;
        let mut total = 0.0;
        for (src, tgt) in pairs {
            let mut tape = Tape::new();
            let logits = self.model.forward_teacher_forced(&mut tape, src, tgt, &mut None)?;
            let loss =
                label_smoothed_ce(&mut tape, logits, tgt, cfg.label_smoothing, cfg.pad_id())?;
            total += tape.scalar_value(loss);
        }
        Ok(total / pairs.len() as f64)
    }
}
