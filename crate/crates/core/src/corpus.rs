//! Synthetic text/waveform corpus: a tiny stand-in for a speech dataset
//! where the text-to-audio ground truth is known analytically.
//!
//! Each text symbol (a letter from a small alphabet) maps to a fixed-length
//! sinusoid segment at a symbol-specific, FFT-bin-centered frequency, so a
//! synthesized waveform can be checked segment by segment against its text
//! via the dominant FFT bin.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    /// Symbols are the first `alphabet_size` lowercase letters.
    pub alphabet_size: usize,
    /// Samples per symbol.
    pub segment_length: usize,
    pub sample_rate: u32,
    /// One frequency per symbol, in Hz.
    pub frequencies: Vec<f64>,
    /// Linear fade at both segment edges, in samples.
    pub fade: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub eval_size: usize,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        // Frequencies centered on bins 8, 16, ..., 64 of a 1024-point FFT at
        // 16 kHz (bin width 15.625 Hz), well under Nyquist.
        let bin_hz = 16000.0 / 1024.0;
        SyntheticCorpusSpec {
            alphabet_size: 8,
            segment_length: 1024,
            sample_rate: 16000,
            frequencies: (1..=8).map(|k| (k * 8) as f64 * bin_hz).collect(),
            fade: 64,
            min_symbols: 4,
            max_symbols: 8,
            train_size: 64,
            val_size: 8,
            eval_size: 8,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: String| Error::Config { field: field.into(), message };
        if self.alphabet_size == 0 || self.alphabet_size > 26 {
            return Err(err("alphabet_size", "must be 1..=26".into()));
        }
        if self.frequencies.len() != self.alphabet_size {
            return Err(err(
                "frequencies",
                format!("{} entries for {} symbols", self.frequencies.len(), self.alphabet_size),
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, &f) in self.frequencies.iter().enumerate() {
            if f <= 0.0 || f >= nyquist {
                return Err(err(
                    "frequencies",
                    format!("symbol {i}: {f} Hz outside (0, Nyquist {nyquist})"),
                ));
            }
        }
        let mut sorted = self.frequencies.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(err("frequencies", "must be pairwise distinct".into()));
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return Err(err("min_symbols", "need 0 < min <= max".into()));
        }
        if 2 * self.fade > self.segment_length {
            return Err(err("fade", "fades overlap: 2*fade > segment_length".into()));
        }
        Ok(())
    }

    pub fn symbol_of_char(&self, c: char) -> Result<usize> {
        let idx = (c as usize).wrapping_sub('a' as usize);
        if idx < self.alphabet_size {
            Ok(idx)
        } else {
            Err(Error::OutOfAlphabet { symbol: c as usize, alphabet: self.alphabet_size })
        }
    }

    pub fn char_of_symbol(&self, s: usize) -> char {
        assert!(s < self.alphabet_size);
        (b'a' + s as u8) as char
    }

    pub fn text_to_symbols(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.symbol_of_char(c)).collect()
    }

    /// One symbol's sinusoid segment with linear fade-in/out.
    pub fn segment(&self, symbol: usize) -> Vec<f64> {
        let f = self.frequencies[symbol];
        let sr = self.sample_rate as f64;
        let n = self.segment_length;
        (0..n)
            .map(|t| {
                let mut v = 0.7 * (2.0 * PI * f * t as f64 / sr).sin();
                if self.fade > 0 {
                    if t < self.fade {
                        v *= t as f64 / self.fade as f64;
                    }
                    if t >= n - self.fade {
                        v *= (n - 1 - t) as f64 / self.fade as f64;
                    }
                }
                v
            })
            .collect()
    }

    /// Concatenated segments for a symbol sequence.
    pub fn waveform(&self, symbols: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(symbols.len() * self.segment_length);
        for &s in symbols {
            out.extend(self.segment(s));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub text: String,
    pub symbols: Vec<usize>,
    pub waveform: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub eval: Vec<Utterance>,
}

/// Deterministic corpus generation: same spec and seed, same corpus.
pub fn gen_corpus(spec: &SyntheticCorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Utterance> {
        (0..n)
            .map(|_| {
                let len = rng.gen_range(spec.min_symbols..=spec.max_symbols);
                let symbols: Vec<usize> =
                    (0..len).map(|_| rng.gen_range(0..spec.alphabet_size)).collect();
                let text: String = symbols.iter().map(|&s| spec.char_of_symbol(s)).collect();
                let waveform = spec.waveform(&symbols);
                Utterance { text, symbols, waveform }
            })
            .collect()
    };
    Ok(Corpus {
        train: split(spec.train_size, &mut rng),
        val: split(spec.val_size, &mut rng),
        eval: split(spec.eval_size, &mut rng),
    })
}

/// Index of the strongest FFT bin of `segment` (one-sided, DC excluded),
/// computed at `fft_size` resolution. Used to verify synthesized audio
/// against the text's expected frequencies.
pub fn dominant_bin(segment: &[f64], fft_size: usize) -> usize {
    use num_complex::Complex64;
    let mut buf: Vec<Complex64> = segment
        .iter()
        .take(fft_size)
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    buf.resize(fft_size, Complex64::new(0.0, 0.0));
    let spec = crate::signal::fft(&buf);
    (1..fft_size / 2)
        .max_by(|&a, &b| spec[a].norm().partial_cmp(&spec[b].norm()).unwrap())
        .unwrap()
}

/// Expected dominant bin for a symbol at a given FFT size.
pub fn expected_bin(spec: &SyntheticCorpusSpec, symbol: usize, fft_size: usize) -> usize {
    (spec.frequencies[symbol] * fft_size as f64 / spec.sample_rate as f64).round() as usize
}
