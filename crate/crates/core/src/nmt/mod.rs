//! Transformer encoder-decoder mapping text symbols to subword unit
//! sequences.
//!
//! Pre-norm residual blocks (more stable at small scale than post-norm) with
//! sinusoidal positions, trained teacher-forced with label-smoothed
//! cross-entropy under a Noam learning-rate schedule.

mod train;

pub use train::{EpochMetrics, NmtTrainer};

use crate::error::{Error, Result};
use crate::nn::{dropout, LayerNorm, Linear};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const MASKED: f64 = -1e30;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NmtConfig {
    /// Text symbols plus their EOS.
    pub src_vocab: usize,
    /// Subword units plus PAD/BOS/EOS sentinels.
    pub tgt_vocab: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ff_units: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Dynamic batching: flush a batch once the summed target lengths pass
    /// this budget.
    pub batch_token_budget: usize,
}

impl NmtConfig {
    /// Desk-scale default; trains in seconds on toy corpora.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        NmtConfig {
            src_vocab,
            tgt_vocab,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ff_units: 256,
            attn_dim: 64,
            heads: 4,
            dropout: 0.1,
            label_smoothing: 0.1,
            warmup_steps: 200,
            grad_clip: 5.0,
            batch_token_budget: 96,
        }
    }

    /// Reference-scale sizes: 6+6 blocks, 2048 ff units, 256-dim attention
    /// with 4 heads, 8000 warmup steps, gradient clip 5.
    pub fn reference(src_vocab: usize, tgt_vocab: usize) -> Self {
        NmtConfig {
            encoder_blocks: 6,
            decoder_blocks: 6,
            ff_units: 2048,
            attn_dim: 256,
            warmup_steps: 8000,
            ..NmtConfig::desk(src_vocab, tgt_vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: String| Error::Config { field: field.into(), message };
        if self.attn_dim % self.heads != 0 {
            return Err(err(
                "attn_dim",
                format!("{} not divisible by {} heads", self.attn_dim, self.heads),
            ));
        }
        if self.attn_dim % 2 != 0 {
            return Err(err("attn_dim", "must be even for sinusoidal positions".into()));
        }
        if self.src_vocab == 0 || self.tgt_vocab < 4 {
            return Err(err("vocab", "source vocab empty or target vocab below sentinels".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(err("label_smoothing", "must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn pad_id(&self) -> usize {
        self.tgt_vocab - 3
    }

    pub fn bos_id(&self) -> usize {
        self.tgt_vocab - 2
    }

    pub fn eos_id(&self) -> usize {
        self.tgt_vocab - 1
    }
}

/// PE[p, 2i] = sin(p / 10000^(2i/dim)), PE[p, 2i+1] = cos(same).
pub fn positional_encoding(length: usize, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "positional encoding needs an even dim, got {dim}");
    let mut data = vec![0.0; length * dim];
    for p in 0..length {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = angle.sin();
            data[p * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, dim], data)
}

/// Additive attention mask: 0 where position q may see position k, a large
/// negative number elsewhere. Every query row keeps at least its own key.
fn causal_mask(n: usize) -> Vec<f64> {
    let mut m = vec![MASKED; n * n];
    for q in 0..n {
        for k in 0..=q {
            m[q * n + k] = 0.0;
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        causal: bool,
    ) -> Var {
        self.forward_with_weights(tape, store, q_in, kv_in, causal).0
    }

    /// Also returns the per-head attention weight matrices [Tq, Tk], for
    /// inspection in tests.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        causal: bool,
    ) -> (Var, Vec<Var>) {
        let tq = tape.shape(q_in)[0];
        let tk = tape.shape(kv_in)[0];
        let q = self.wq.forward(tape, store, q_in);
        let k = self.wk.forward(tape, store, kv_in);
        let v = self.wv.forward(tape, store, kv_in);
        let d_head = self.dim / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mask = if causal {
            assert_eq!(tq, tk, "causal attention requires self-attention");
            Some(tape.constant(vec![tq, tk], causal_mask(tq)))
        } else {
            None
        };
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kht = tape.transpose(kh);
            let scores = tape.matmul(qh, kht);
            let mut scores = tape.mul_scalar(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m);
            }
            let attn = tape.softmax(scores);
            outs.push(tape.matmul(attn, vh));
            weights.push(attn);
        }
        let concat = tape.concat_cols(&outs);
        (self.wo.forward(tape, store, concat), weights)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, dim: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.ff1"), dim, ff, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), ff, dim, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.inner.forward(tape, store, x);
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

pub struct NmtModel {
    pub cfg: NmtConfig,
    pub store: ParamStore,
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc_blocks: Vec<EncoderBlock>,
    dec_blocks: Vec<DecoderBlock>,
    enc_ln: LayerNorm,
    dec_ln: LayerNorm,
    out_proj: Linear,
}

/// Dropout source during training; `None` disables dropout entirely.
pub type DropRng<'a> = Option<&'a mut ChaCha8Rng>;

impl NmtModel {
    pub fn new(cfg: NmtConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.attn_dim;
        let src_embed =
            store.add("src_embed", Tensor::uniform_init(vec![cfg.src_vocab, d], d, &mut rng));
        let tgt_embed =
            store.add("tgt_embed", Tensor::uniform_init(vec![cfg.tgt_vocab, d], d, &mut rng));
        let enc_blocks = (0..cfg.encoder_blocks)
            .map(|i| EncoderBlock {
                ln1: LayerNorm::new(&mut store, &format!("enc{i}.ln1"), d),
                attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("enc{i}.attn"),
                    d,
                    cfg.heads,
                    &mut rng,
                ),
                ln2: LayerNorm::new(&mut store, &format!("enc{i}.ln2"), d),
                ff: FeedForward::new(&mut store, &format!("enc{i}"), d, cfg.ff_units, &mut rng),
            })
            .collect();
        let dec_blocks = (0..cfg.decoder_blocks)
            .map(|i| DecoderBlock {
                ln1: LayerNorm::new(&mut store, &format!("dec{i}.ln1"), d),
                self_attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("dec{i}.self_attn"),
                    d,
                    cfg.heads,
                    &mut rng,
                ),
                ln2: LayerNorm::new(&mut store, &format!("dec{i}.ln2"), d),
                cross_attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("dec{i}.cross_attn"),
                    d,
                    cfg.heads,
                    &mut rng,
                ),
                ln3: LayerNorm::new(&mut store, &format!("dec{i}.ln3"), d),
                ff: FeedForward::new(&mut store, &format!("dec{i}"), d, cfg.ff_units, &mut rng),
            })
            .collect();
        let enc_ln = LayerNorm::new(&mut store, "enc.final_ln", d);
        let dec_ln = LayerNorm::new(&mut store, "dec.final_ln", d);
        let out_proj = Linear::new(&mut store, "out_proj", d, cfg.tgt_vocab, &mut rng);
        Ok(NmtModel {
            cfg,
            store,
            src_embed,
            tgt_embed,
            enc_blocks,
            dec_blocks,
            enc_ln,
            dec_ln,
            out_proj,
        })
    }

    fn embed(&self, tape: &mut Tape, table: ParamId, ids: &[usize], rng: &mut DropRng) -> Var {
        let d = self.cfg.attn_dim;
        let table = tape.param(&self.store, table);
        let e = tape.embedding(table, ids);
        let e = tape.mul_scalar(e, (d as f64).sqrt());
        let pe = positional_encoding(ids.len(), d);
        let pe = tape.constant(pe.shape.clone(), pe.data);
        let x = tape.add(e, pe);
        self.maybe_dropout(tape, x, rng)
    }

    fn maybe_dropout(&self, tape: &mut Tape, x: Var, rng: &mut DropRng) -> Var {
        match rng {
            Some(r) => dropout(tape, x, self.cfg.dropout, *r),
            None => x,
        }
    }

    /// Encoder stack over the source; the result feeds every decoder block.
    pub fn encode(&self, tape: &mut Tape, src: &[usize], rng: &mut DropRng) -> Result<Var> {
        if src.is_empty() {
            return Err(Error::EmptyInput("source sequence"));
        }
        let mut x = self.embed(tape, self.src_embed, src, rng);
        for block in &self.enc_blocks {
            let normed = block.ln1.forward(tape, &self.store, x);
            let attn = block.attn.forward(tape, &self.store, normed, normed, false);
            let attn = self.maybe_dropout(tape, attn, rng);
            x = tape.add(x, attn);
            let normed = block.ln2.forward(tape, &self.store, x);
            let ff = block.ff.forward(tape, &self.store, normed);
            let ff = self.maybe_dropout(tape, ff, rng);
            x = tape.add(x, ff);
        }
        Ok(block_final(&self.enc_ln, tape, &self.store, x))
    }

    /// Logits for every position of `dec_input` (BOS-shifted target), given
    /// the encoder memory. Causal self-attention keeps position t blind to
    /// positions after t.
    pub fn decode_logits(
        &self,
        tape: &mut Tape,
        memory: Var,
        dec_input: &[usize],
        rng: &mut DropRng,
    ) -> Var {
        let mut x = self.embed(tape, self.tgt_embed, dec_input, rng);
        for block in &self.dec_blocks {
            let normed = block.ln1.forward(tape, &self.store, x);
            let attn = block.self_attn.forward(tape, &self.store, normed, normed, true);
            let attn = self.maybe_dropout(tape, attn, rng);
            x = tape.add(x, attn);
            let normed = block.ln2.forward(tape, &self.store, x);
            let cross = block.cross_attn.forward(tape, &self.store, normed, memory, false);
            let cross = self.maybe_dropout(tape, cross, rng);
            x = tape.add(x, cross);
            let normed = block.ln3.forward(tape, &self.store, x);
            let ff = block.ff.forward(tape, &self.store, normed);
            let ff = self.maybe_dropout(tape, ff, rng);
            x = tape.add(x, ff);
        }
        let x = block_final(&self.dec_ln, tape, &self.store, x);
        self.out_proj.forward(tape, &self.store, x)
    }

    /// Teacher-forced forward: row t of the result scores the prediction of
    /// `tgt[t]` from the source and `tgt[..t]`. `tgt` ends with EOS.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        src: &[usize],
        tgt: &[usize],
        rng: &mut DropRng,
    ) -> Result<Var> {
        if tgt.is_empty() {
            return Err(Error::EmptyInput("target sequence"));
        }
        let memory = self.encode(tape, src, rng)?;
        let mut dec_input = Vec::with_capacity(tgt.len());
        dec_input.push(self.cfg.bos_id());
        dec_input.extend_from_slice(&tgt[..tgt.len() - 1]);
        Ok(self.decode_logits(tape, memory, &dec_input, rng))
    }
}

fn block_final(ln: &LayerNorm, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
    ln.forward(tape, store, x)
}

/// Cross-entropy against the smoothed target distribution: (1-eps) on the
/// gold label, eps/(V-1) spread over the rest, averaged over non-PAD rows.
pub fn label_smoothed_ce(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    eps: f64,
    pad_id: usize,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape.len(), 2, "logits must be [T, vocab]");
    let (t, v) = (shape[0], shape[1]);
    assert_eq!(t, targets.len(), "one target per logit row");
    let live = targets.iter().filter(|&&y| y != pad_id).count();
    if live == 0 {
        return Err(Error::EmptyInput("all target positions are padding"));
    }
    let off_mass = eps / (v as f64 - 1.0);
    let mut q = vec![0.0; t * v];
    for (row, &y) in targets.iter().enumerate() {
        if y == pad_id {
            continue;
        }
        assert!(y < v, "target id {y} outside vocab {v}");
        for col in 0..v {
            q[row * v + col] = if col == y { 1.0 - eps } else { off_mass };
        }
    }
    let q = tape.constant(vec![t, v], q);
    let logp = tape.log_softmax(logits);
    let prod = tape.mul(q, logp);
    let total = tape.sum(prod);
    let total = tape.mul_scalar(total, -1.0 / live as f64);
    Ok(total)
}
