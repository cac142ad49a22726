//! Small layer builders shared by the VQ-VAE networks, the Transformer and
//! the LSTM: each layer owns `ParamId`s and replays itself onto a tape.

use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};
use rand::Rng;

/// Dense layer: y = x W + b over [T, in] -> [T, out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::uniform_init(vec![fan_in, fan_out], fan_in, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// 1-D convolution layer with per-channel bias over [C_in, T].
#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::he_uniform_init(vec![c_out, c_in, kernel], c_in * kernel, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        Conv1dLayer { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv1d(x, w, self.stride, self.pad);
        tape.add_chan(y, b)
    }
}

/// Transposed 1-D convolution layer; weight layout [C_in, C_out, K] so the
/// forward pass is the exact adjoint of `conv1d` with that weight.
#[derive(Clone, Debug)]
pub struct ConvT1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::he_uniform_init(vec![c_in, c_out, kernel], c_in * kernel / stride.max(1), rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        ConvT1dLayer { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv_transpose1d(x, w, self.stride, self.pad);
        tape.add_chan(y, b)
    }
}

/// Per-row layer norm followed by a learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::new(vec![dim], vec![1.0; dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        LayerNorm { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.layer_norm(x, self.eps);
        let y = tape.mul_row(y, g);
        tape.add_row(y, b)
    }
}

/// Inverted dropout: scales kept activations by 1/(1-rate) at train time,
/// identity when `rate == 0` or at inference.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, rate: f64, rng: &mut R) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let n = tape.value(x).len();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(tape.shape(x).to_vec(), mask);
    tape.mul(x, m)
}
