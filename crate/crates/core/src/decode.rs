//! Beam-search decoding with optional LM shallow fusion, token-error-rate
//! evaluation, and the text-to-waveform synthesis chain.

use crate::error::{Error, Result};
use crate::lm::{LmState, LstmLm};
use crate::nmt::NmtModel;
use crate::subword::SubwordModel;
use crate::tape::{Tape, Var};
use crate::vqvae::VqVae;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub lm_weight: f64,
    pub max_length: usize,
}

impl DecodeConfig {
    pub fn new(beam_size: usize, lm_weight: f64, max_length: usize) -> Self {
        assert!(beam_size >= 1, "beam size must be at least 1");
        assert!(max_length > 0, "max length must be positive");
        assert!(lm_weight >= 0.0, "lm weight must be non-negative");
        DecodeConfig { beam_size, lm_weight, max_length }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Generated unit ids, EOS included as the final token when finished.
    pub tokens: Vec<usize>,
    /// Raw accumulated log-probability (NMT + lm_weight * LM); no length
    /// normalization.
    pub score: f64,
    /// False only when the beam hit max_length with an empty finished pool.
    pub finished: bool,
}

/// Anything that can score the next token given a generated prefix. The beam
/// search is written against this so toy table models can drive the
/// exhaustive-search oracle tests.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> usize;
    /// Log-probabilities over the next token after `prefix`.
    fn next_logprobs(&mut self, prefix: &[usize]) -> Vec<f64>;
}

/// NMT-backed scorer: encodes the source once and replays the decoder over
/// the whole prefix per step (the decoder has no incremental cache).
pub struct NmtScorer<'a> {
    model: &'a NmtModel,
    tape: Tape,
    memory: Var,
}

impl<'a> NmtScorer<'a> {
    pub fn new(model: &'a NmtModel, src: &[usize]) -> Result<Self> {
        let mut tape = Tape::new();
        let memory = model.encode(&mut tape, src, &mut None)?;
        Ok(NmtScorer { model, tape, memory })
    }
}

impl NextTokenScorer for NmtScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.tgt_vocab
    }

    fn eos_id(&self) -> usize {
        self.model.cfg.eos_id()
    }

    fn next_logprobs(&mut self, prefix: &[usize]) -> Vec<f64> {
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(self.model.cfg.bos_id());
        dec_input.extend_from_slice(prefix);
        let logits = self.model.decode_logits(&mut self.tape, self.memory, &dec_input, &mut None);
        let vals = self.tape.value(logits);
        let v = self.model.cfg.tgt_vocab;
        log_softmax_row(&vals[vals.len() - v..])
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    let log_z = m + z.ln();
    row.iter().map(|x| x - log_z).collect()
}

/// Elementwise log-domain fusion: nmt + lm_weight * lm.
pub fn fused_score(nmt_logprobs: &[f64], lm_logprobs: &[f64], lm_weight: f64) -> Vec<f64> {
    assert_eq!(
        nmt_logprobs.len(),
        lm_logprobs.len(),
        "fusion requires matching vocab sizes"
    );
    nmt_logprobs
        .iter()
        .zip(lm_logprobs)
        .map(|(n, l)| n + lm_weight * l)
        .collect()
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
    lm_state: Option<LmState>,
    lm_logprobs: Option<Vec<f64>>,
}

/// Standard beam search. Each step expands every live hypothesis over the
/// full vocabulary and keeps the top `beam_size` candidates by fused score;
/// candidates ending in EOS move to a finished pool. Terminates when the
/// pool holds `beam_size` entries, live hypotheses run out, or `max_length`
/// tokens have been generated. Score ties break toward the lexicographically
/// smallest token sequence.
pub fn beam_search(
    scorer: &mut dyn NextTokenScorer,
    lm: Option<&LstmLm>,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    let eos = scorer.eos_id();
    let fuse_lm = lm.filter(|_| cfg.lm_weight > 0.0);
    if let Some(lm) = fuse_lm {
        assert_eq!(lm.cfg.vocab, scorer.vocab_size(), "LM and NMT vocab sizes differ");
    }

    let root_lm = fuse_lm.map(|lm| {
        let (lp, state) = lm.step(lm.cfg.bos_id(), &lm.initial_state());
        (state, lp)
    });
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        lm_state: root_lm.as_ref().map(|(s, _)| s.clone()),
        lm_logprobs: root_lm.map(|(_, lp)| lp),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _step in 0..cfg.max_length {
        if live.is_empty() || finished.len() >= cfg.beam_size {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let nmt_lp = scorer.next_logprobs(&hyp.tokens);
            let scores = match &hyp.lm_logprobs {
                Some(lm_lp) => fused_score(&nmt_lp, lm_lp, cfg.lm_weight),
                None => nmt_lp,
            };
            for (tok, s) in scores.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    score: hyp.score + s,
                    lm_state: hyp.lm_state.clone(),
                    lm_logprobs: None,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(cfg.beam_size);
        live = Vec::new();
        for mut cand in candidates {
            if *cand.tokens.last().unwrap() == eos {
                finished.push(cand);
            } else {
                // Advance the LM state only for survivors.
                if let (Some(lm), Some(state)) = (fuse_lm, cand.lm_state.take()) {
                    let tok = *cand.tokens.last().unwrap();
                    let (lp, next) = lm.step(tok, &state);
                    cand.lm_state = Some(next);
                    cand.lm_logprobs = Some(lp);
                }
                live.push(cand);
            }
        }
    }

    let pick = |pool: &[Hypothesis]| -> Option<(Vec<usize>, f64)> {
        pool.iter()
            .max_by(|a, b| {
                a.score
                    .partial_cmp(&b.score)
                    .unwrap()
                    .then_with(|| b.tokens.cmp(&a.tokens))
            })
            .map(|h| (h.tokens.clone(), h.score))
    };
    if let Some((tokens, score)) = pick(&finished) {
        Ok(DecodeOutput { tokens, score, finished: true })
    } else if let Some((tokens, score)) = pick(&live) {
        Ok(DecodeOutput { tokens, score, finished: false })
    } else {
        Err(Error::EmptyDecodeOutput)
    }
}

/// Levenshtein distance (unit-cost substitution/insertion/deletion) over the
/// reference length, as a percentage.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (n, m) = (hyp.len(), reference.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(100.0 * prev[m] as f64 / m as f64)
}

/// Full synthesis chain: beam-search the unit sequence, expand subwords to
/// quantizer symbols, look the symbols up in the codebook and run the
/// waveform decoder. Output length is num_symbols * DSF.
pub fn synthesize(
    nmt: &NmtModel,
    subword: &SubwordModel,
    vqvae: &VqVae,
    lm: Option<&LstmLm>,
    text: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<f64>> {
    let mut scorer = NmtScorer::new(nmt, text)?;
    let out = beam_search(&mut scorer, lm, cfg)?;
    let symbols = subword.decode(&out.tokens)?;
    if symbols.is_empty() {
        return Err(Error::EmptyDecodeOutput);
    }
    vqvae.decode_ids(&symbols)
}
