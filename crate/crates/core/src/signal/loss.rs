//! Spectral reconstruction losses built on tape ops, so every loss is
//! differentiable w.r.t. the generated signal.

use super::stft::StftConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Magnitudes are clamped here before the log to keep the magnitude loss
/// finite on silent frames. The floor also bounds how much the loss can
/// reward silence in near-empty bins: with a very low floor (1e-7), tonal
/// references whose off-tone bins are essentially zero make "output
/// nothing" a strong local optimum of the log-magnitude term.
pub const LOG_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiResConfig {
    pub resolutions: Vec<StftConfig>,
}

impl MultiResConfig {
    pub fn validate(&self) {
        assert!(!self.resolutions.is_empty(), "at least one STFT resolution required");
        for r in &self.resolutions {
            r.validate();
        }
    }
}

impl Default for MultiResConfig {
    fn default() -> Self {
        MultiResConfig {
            resolutions: vec![
                StftConfig::new(512, 128, 512),
                StftConfig::new(1024, 256, 1024),
                StftConfig::new(256, 64, 256),
            ],
        }
    }
}

/// Spectral convergence and log-magnitude losses for one resolution.
///
/// L_sc = ||S - S_hat||_F / ||S||_F, L_mag = mean |log S - log S_hat|.
/// Errors when the reference spectrogram has zero energy.
pub fn stft_loss(tape: &mut Tape, x: Var, x_hat: Var, cfg: &StftConfig) -> Result<(Var, Var)> {
    let s_ref = tape.stft_magnitude(x, cfg);
    let s_hat = tape.stft_magnitude(x_hat, cfg);

    let ref_energy: f64 = tape.value(s_ref).iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::DegenerateReference);
    }

    let diff = tape.sub(s_ref, s_hat);
    let diff_sq = tape.mul(diff, diff);
    let diff_sum = tape.sum(diff_sq);
    let diff_norm = tape.sqrt(diff_sum);
    let ref_sq = tape.mul(s_ref, s_ref);
    let ref_sum = tape.sum(ref_sq);
    let ref_norm = tape.sqrt(ref_sum);
    let l_sc = tape.div(diff_norm, ref_norm);

    let ref_floored = tape.clamp_min(s_ref, LOG_FLOOR);
    let hat_floored = tape.clamp_min(s_hat, LOG_FLOOR);
    let log_ref = tape.log(ref_floored);
    let log_hat = tape.log(hat_floored);
    let log_diff = tape.sub(log_ref, log_hat);
    let log_abs = tape.abs(log_diff);
    let l_mag = tape.mean(log_abs);

    Ok((l_sc, l_mag))
}

/// Mean over resolutions of (L_sc + L_mag).
pub fn multi_res_stft_loss(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    cfg: &MultiResConfig,
) -> Result<Var> {
    cfg.validate();
    let mut total: Option<Var> = None;
    for res in &cfg.resolutions {
        let (l_sc, l_mag) = stft_loss(tape, x, x_hat, res)?;
        let pair = tape.add(l_sc, l_mag);
        total = Some(match total {
            Some(t) => tape.add(t, pair),
            None => pair,
        });
    }
    let total = total.unwrap();
    Ok(tape.mul_scalar(total, 1.0 / cfg.resolutions.len() as f64))
}
