//! LSTM language model over subword unit sequences.
//!
//! Supplies per-token log-probabilities for shallow fusion during beam
//! search and perplexity reporting. Training runs on the tape; beam-time
//! scoring uses a raw incremental cell (caller-owned state, one token at a
//! time) that mirrors the tape computation.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::{clip_grad_norm, noam_lr, Adam};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LmConfig {
    /// Subword units plus PAD/BOS/EOS sentinels; shared with the NMT target.
    pub vocab: usize,
    pub hidden_units: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub warmup_steps: usize,
    pub grad_clip: f64,
}

impl LmConfig {
    /// Desk-scale default: 1 layer of 128 units.
    pub fn desk(vocab: usize) -> Self {
        LmConfig {
            vocab,
            hidden_units: 128,
            num_layers: 1,
            embed_dim: 64,
            warmup_steps: 200,
            grad_clip: 5.0,
        }
    }

    /// Reference-scale: 1024 units; 1, 2 or 4 layers.
    pub fn reference(vocab: usize, num_layers: usize) -> Self {
        LmConfig { hidden_units: 1024, num_layers, embed_dim: 256, ..LmConfig::desk(vocab) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config {
                field: "num_layers".into(),
                message: "at least one LSTM layer required".into(),
            });
        }
        if self.vocab < 4 {
            return Err(Error::Config {
                field: "vocab".into(),
                message: "vocab must cover at least one unit plus sentinels".into(),
            });
        }
        Ok(())
    }

    pub fn pad_id(&self) -> usize {
        self.vocab - 3
    }

    pub fn bos_id(&self) -> usize {
        self.vocab - 2
    }

    pub fn eos_id(&self) -> usize {
        self.vocab - 1
    }
}

/// One layer's weights. Gate layout along the 4H axis: input, forget, cell
/// candidate, output.
#[derive(Clone, Debug)]
struct LstmLayer {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

pub struct LstmLm {
    pub cfg: LmConfig,
    pub store: ParamStore,
    embed: ParamId,
    layers: Vec<LstmLayer>,
    out: Linear,
}

/// Caller-owned recurrent state: hidden and cell vectors per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmLm {
    pub fn new(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (e, h) = (cfg.embed_dim, cfg.hidden_units);
        let embed = store.add("embed", Tensor::uniform_init(vec![cfg.vocab, e], e, &mut rng));
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let in_dim = if l == 0 { e } else { h };
                LstmLayer {
                    w_x: store.add(
                        format!("lstm{l}.w_x"),
                        Tensor::uniform_init(vec![in_dim, 4 * h], in_dim, &mut rng),
                    ),
                    w_h: store.add(
                        format!("lstm{l}.w_h"),
                        Tensor::uniform_init(vec![h, 4 * h], h, &mut rng),
                    ),
                    b: store.add(format!("lstm{l}.b"), Tensor::zeros(vec![4 * h])),
                }
            })
            .collect();
        let out = Linear::new(&mut store, "out", h, cfg.vocab, &mut rng);
        Ok(LstmLm { cfg, store, embed, layers, out })
    }

    pub fn initial_state(&self) -> LmState {
        let zeros = vec![vec![0.0; self.cfg.hidden_units]; self.cfg.num_layers];
        LmState { h: zeros.clone(), c: zeros }
    }

    /// Feed one token through the recurrence; returns log-probabilities of
    /// the next token and the advanced state. Pure f64 (no tape), suitable
    /// for per-beam incremental scoring.
    pub fn step(&self, token: usize, state: &LmState) -> (Vec<f64>, LmState) {
        assert!(token < self.cfg.vocab, "token {token} outside vocab {}", self.cfg.vocab);
        let h_units = self.cfg.hidden_units;
        let e = self.cfg.embed_dim;
        let embed = &self.store.get(self.embed).data;
        let mut x: Vec<f64> = embed[token * e..(token + 1) * e].to_vec();
        let mut next = state.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let w_x = &self.store.get(layer.w_x).data;
            let w_h = &self.store.get(layer.w_h).data;
            let b = &self.store.get(layer.b).data;
            let cols = 4 * h_units;
            let mut gates = b.clone();
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    for j in 0..cols {
                        gates[j] += xi * w_x[i * cols + j];
                    }
                }
            }
            for (i, &hi) in state.h[l].iter().enumerate() {
                if hi != 0.0 {
                    for j in 0..cols {
                        gates[j] += hi * w_h[i * cols + j];
                    }
                }
            }
            let mut h_new = vec![0.0; h_units];
            let mut c_new = vec![0.0; h_units];
            for j in 0..h_units {
                let i_g = sigmoid(gates[j]);
                let f_g = sigmoid(gates[h_units + j]);
                let g_g = gates[2 * h_units + j].tanh();
                let o_g = sigmoid(gates[3 * h_units + j]);
                c_new[j] = f_g * state.c[l][j] + i_g * g_g;
                h_new[j] = o_g * c_new[j].tanh();
            }
            next.h[l] = h_new.clone();
            next.c[l] = c_new;
            x = h_new;
        }
        // Output projection and log-softmax.
        let w = &self.store.get(self.out.w).data;
        let bias = &self.store.get(self.out.b).data;
        let v = self.cfg.vocab;
        let mut logits = bias.clone();
        for (i, &hi) in x.iter().enumerate() {
            for j in 0..v {
                logits[j] += hi * w[i * v + j];
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let log_z = m + z.ln();
        let logprobs = logits.iter().map(|l| l - log_z).collect();
        (logprobs, next)
    }

    /// Next-token log-probabilities after consuming a whole prefix, starting
    /// from BOS. `lm_logprob(&[])` scores the first token.
    pub fn logprob_after(&self, prefix: &[usize]) -> Vec<f64> {
        let mut state = self.initial_state();
        let mut out;
        (out, state) = self.step(self.cfg.bos_id(), &state);
        for &tok in prefix {
            (out, state) = self.step(tok, &state);
        }
        out
    }

    /// Tape forward over a whole sequence: row t holds the logits for
    /// predicting `seq[t]` from BOS and `seq[..t]`.
    pub fn forward_full(&self, tape: &mut Tape, seq: &[usize]) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("lm sequence"));
        }
        let h_units = self.cfg.hidden_units;
        let mut inputs = Vec::with_capacity(seq.len());
        inputs.push(self.cfg.bos_id());
        inputs.extend_from_slice(&seq[..seq.len() - 1]);
        let embed = tape.param(&self.store, self.embed);

        let mut h: Vec<Var> = Vec::new();
        let mut c: Vec<Var> = Vec::new();
        for _ in &self.layers {
            h.push(tape.constant(vec![1, h_units], vec![0.0; h_units]));
            c.push(tape.constant(vec![1, h_units], vec![0.0; h_units]));
        }
        let mut rows = Vec::with_capacity(inputs.len());
        for &tok in &inputs {
            let mut x = tape.embedding(embed, &[tok]);
            for (l, layer) in self.layers.iter().enumerate() {
                let w_x = tape.param(&self.store, layer.w_x);
                let w_h = tape.param(&self.store, layer.w_h);
                let b = tape.param(&self.store, layer.b);
                let gx = tape.matmul(x, w_x);
                let gh = tape.matmul(h[l], w_h);
                let g = tape.add(gx, gh);
                let gates = tape.add_row(g, b);
                let i_g = tape.slice_cols(gates, 0, h_units);
                let i_g = tape.sigmoid(i_g);
                let f_g = tape.slice_cols(gates, h_units, 2 * h_units);
                let f_g = tape.sigmoid(f_g);
                let g_g = tape.slice_cols(gates, 2 * h_units, 3 * h_units);
                let g_g = tape.tanh(g_g);
                let o_g = tape.slice_cols(gates, 3 * h_units, 4 * h_units);
                let o_g = tape.sigmoid(o_g);
                let fc = tape.mul(f_g, c[l]);
                let ig = tape.mul(i_g, g_g);
                let c_new = tape.add(fc, ig);
                let c_act = tape.tanh(c_new);
                let h_new = tape.mul(o_g, c_act);
                h[l] = h_new;
                c[l] = c_new;
                x = h_new;
            }
            rows.push(self.out.forward(tape, &self.store, x));
        }
        Ok(concat_rows(tape, &rows))
    }

    /// exp(mean negative log-likelihood per token); EOS is scored, PAD is
    /// not (sequences here are unpadded, so every token counts).
    pub fn perplexity(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyInput("lm corpus"));
        }
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for seq in corpus {
            let mut state = self.initial_state();
            let mut logprobs;
            (logprobs, state) = self.step(self.cfg.bos_id(), &state);
            for &tok in seq {
                nll -= logprobs[tok];
                tokens += 1;
                (logprobs, state) = self.step(tok, &state);
            }
        }
        Ok((nll / tokens as f64).exp())
    }
}

/// Stack [1, V] rows into [T, V] (transpose of column concatenation).
fn concat_rows(tape: &mut Tape, rows: &[Var]) -> Var {
    let cols: Vec<Var> = rows.iter().map(|&r| tape.transpose(r)).collect();
    let wide = tape.concat_cols(&cols);
    tape.transpose(wide)
}

pub struct LmTrainer {
    pub model: LstmLm,
    pub opt: Adam,
    pub step: usize,
}

impl LmTrainer {
    pub fn new(model: LstmLm) -> Self {
        LmTrainer { model, opt: Adam::new(), step: 0 }
    }

    /// One shuffled pass, one optimizer step per sequence, plain
    /// cross-entropy (no label smoothing for the LM).
    pub fn train_epoch(&mut self, corpus: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("lm corpus"));
        }
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in &order {
            let seq = &corpus[i];
            if seq.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let logits = self.model.forward_full(&mut tape, seq)?;
            let loss = crate::nmt::label_smoothed_ce(
                &mut tape,
                logits,
                seq,
                0.0,
                self.model.cfg.pad_id(),
            )?;
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step + 1,
                    detail: format!("lm loss {loss_val}"),
                });
            }
            let grads = tape.backward(loss);
            let mut g = grads.param_grads(&self.model.store);
            clip_grad_norm(&mut g, self.model.cfg.grad_clip);
            self.step += 1;
            let lr = noam_lr(self.step, self.model.cfg.hidden_units, self.model.cfg.warmup_steps);
            self.opt.step(&mut self.model.store, &g, lr);
            total += loss_val;
            count += 1;
        }
        Ok(total / count as f64)
    }
}
