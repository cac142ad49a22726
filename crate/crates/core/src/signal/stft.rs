//! STFT magnitude analysis: forward spectrograms and the hand-derived
//! gradient of the magnitude w.r.t. the time signal, used by the tape op.

use super::fft::{fft_real, ifft};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_length: usize,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop_size: usize, win_length: usize) -> Self {
        let cfg = StftConfig { fft_size, hop_size, win_length };
        cfg.validate();
        cfg
    }

    pub fn validate(&self) {
        assert!(
            self.fft_size.is_power_of_two(),
            "fft_size {} must be a power of two",
            self.fft_size
        );
        assert!(
            self.win_length <= self.fft_size,
            "win_length {} exceeds fft_size {}",
            self.win_length,
            self.fft_size
        );
        assert!(self.hop_size >= 1, "hop_size must be >= 1");
    }

    /// Frames that fit fully inside the signal; no padding at the edges.
    pub fn num_frames(&self, signal_len: usize) -> usize {
        assert!(
            signal_len >= self.win_length,
            "signal of length {} is shorter than the window {}",
            signal_len,
            self.win_length
        );
        1 + (signal_len - self.win_length) / self.hop_size
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// One-sided magnitude spectrogram, row-major [frames, bins].
pub fn magnitude(x: &[f64], cfg: &StftConfig) -> Vec<f64> {
    cfg.validate();
    let frames = cfg.num_frames(x.len());
    let bins = cfg.num_bins();
    let window = hann_window(cfg.win_length);
    let mut out = vec![0.0; frames * bins];
    let mut frame = vec![0.0; cfg.win_length];
    for f in 0..frames {
        let start = f * cfg.hop_size;
        for j in 0..cfg.win_length {
            frame[j] = x[start + j] * window[j];
        }
        let spec = fft_real(&frame, cfg.fft_size);
        for k in 0..bins {
            out[f * bins + k] = spec[k].norm();
        }
    }
    out
}

/// Gradient of `magnitude` w.r.t. the input signal given the upstream
/// gradient over the [frames, bins] magnitudes.
///
/// Per frame, with X = DFT(windowed frame): d|X_k|/df_j =
/// Re(X_k e^{2 pi i k j / n}) / |X_k|, so the frame gradient is the real
/// part of n * IFFT(g_k X_k / |X_k|) restricted to one-sided bins.
pub fn magnitude_backward(x: &[f64], cfg: &StftConfig, grad_mag: &[f64]) -> Vec<f64> {
    let frames = cfg.num_frames(x.len());
    let bins = cfg.num_bins();
    assert_eq!(grad_mag.len(), frames * bins);
    let n = cfg.fft_size;
    let window = hann_window(cfg.win_length);
    let mut grad_x = vec![0.0; x.len()];
    let mut frame = vec![0.0; cfg.win_length];
    for f in 0..frames {
        let start = f * cfg.hop_size;
        for j in 0..cfg.win_length {
            frame[j] = x[start + j] * window[j];
        }
        let spec = fft_real(&frame, n);
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..bins {
            let mag = spec[k].norm();
            if mag > 0.0 {
                v[k] = spec[k] * (grad_mag[f * bins + k] / mag);
            }
        }
        let grad_frame = ifft(&v);
        for j in 0..cfg.win_length {
            grad_x[start + j] += n as f64 * grad_frame[j].re * window[j];
        }
    }
    grad_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::new(512, 128, 512);
        assert_eq!(cfg.num_frames(8192), 61);
        assert_eq!(cfg.num_bins(), 257);
    }

    #[test]
    fn zero_signal_has_zero_magnitude() {
        let cfg = StftConfig::new(256, 64, 256);
        let mag = magnitude(&vec![0.0; 1024], &cfg);
        assert!(mag.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sinusoid_concentrates_at_its_bin() {
        let cfg = StftConfig::new(512, 128, 512);
        // Frequency at bin center k = f * fft_size / sample_rate.
        let sr = 16000.0;
        let k = 20;
        let f = k as f64 * sr / cfg.fft_size as f64;
        let x: Vec<f64> = (0..4096)
            .map(|t| (2.0 * PI * f * t as f64 / sr).sin())
            .collect();
        let mag = magnitude(&x, &cfg);
        let bins = cfg.num_bins();
        for frame in mag.chunks(bins) {
            let argmax = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = StftConfig::new(64, 16, 64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Loss = weighted sum of magnitudes with random weights.
        let frames = cfg.num_frames(x.len());
        let bins = cfg.num_bins();
        let w: Vec<f64> = (0..frames * bins).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = magnitude_backward(&x, &cfg, &w);
        let eps = 1e-5;
        for probe in [0usize, 17, 63, 127] {
            let mut xp = x.clone();
            xp[probe] += eps;
            let lp: f64 = magnitude(&xp, &cfg).iter().zip(&w).map(|(m, w)| m * w).sum();
            xp[probe] -= 2.0 * eps;
            let lm: f64 = magnitude(&xp, &cfg).iter().zip(&w).map(|(m, w)| m * w).sum();
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (grad[probe] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "sample {probe}: analytic {} vs fd {}",
                grad[probe],
                fd
            );
        }
    }
}
