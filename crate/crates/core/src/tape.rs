//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Every op appends a node holding its output value and enough metadata to
//! replay the chain rule in reverse. The tape is append-only, so reverse
//! node order is a valid reverse topological order and each tensor use
//! accumulates its gradient exactly once.

use crate::signal::stft::{self, StftConfig};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
#[allow(dead_code)] // some recorded operands are only for graph bookkeeping
enum Op {
    Leaf { param: Option<(u64, ParamId)>, requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, stride: usize, pad: usize },
    ConvT1d { x: Var, w: Var, stride: usize, pad: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    AddRow { x: Var, b: Var },
    MulRow { x: Var, s: Var },
    AddChan { x: Var, b: Var },
    AvgPool1d { x: Var, factor: usize },
    StopGrad(Var),
    Reshape(Var),
    StftMag { x: Var, cfg: StftConfig },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_of: Vec<Option<(u64, ParamId)>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given var (zeros if it never
    /// received gradient).
    pub fn wrt(&self, v: Var, numel: usize) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; numel],
        }
    }

    pub fn try_wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Collect per-parameter gradients, summing if a parameter was bound to
    /// the tape more than once.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for (i, pid) in self.param_of.iter().enumerate() {
            if let (Some((sid, pid)), Some(g)) = (pid, &self.grads[i]) {
                if *sid != store.store_id() {
                    continue;
                }
                match &mut out[pid.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        r => panic!("expected rank 1 or 2, got rank {r}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v.0].value.len(), 1, "expected a scalar var");
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            panic!("non-finite value {bad} produced by {:?}", op_name(&op));
        }
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves ----

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push(shape, value, Op::Leaf { param: None, requires_grad: false })
    }

    pub fn constant_from(&mut self, t: &Tensor) -> Var {
        self.constant(t.shape.clone(), t.data.clone())
    }

    /// Non-parameter leaf that still accumulates gradient (inputs under
    /// gradient checks).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf { param: None, requires_grad: true },
        )
    }

    /// Bind a stored parameter to this tape. While the tape is frozen the
    /// parameter is recorded as a plain constant, so gradient flows through
    /// its activations but never into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        if self.frozen {
            return self.constant(t.shape.clone(), t.data.clone());
        }
        self.push(
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf { param: Some((store.store_id(), id)), requires_grad: true },
        )
    }

    /// Freeze or unfreeze parameter binding (see [`Tape::param`]).
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa, sb, "{name}: shape mismatch {sa:?} vs {sb:?}");
        (
            sa.clone(),
            self.nodes[a.0].value.clone(),
            self.nodes[b.0].value.clone(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (shape, va, vb) = self.binary_same_shape(a, b, "add");
        let out = va.iter().zip(&vb).map(|(x, y)| x + y).collect();
        self.push(shape, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (shape, va, vb) = self.binary_same_shape(a, b, "sub");
        let out = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
        self.push(shape, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (shape, va, vb) = self.binary_same_shape(a, b, "mul");
        let out = va.iter().zip(&vb).map(|(x, y)| x * y).collect();
        self.push(shape, out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (shape, va, vb) = self.binary_same_shape(a, b, "div");
        let out = va.iter().zip(&vb).map(|(x, y)| x / y).collect();
        self.push(shape, out, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|x| -x).collect();
        self.push(shape, out, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        self.push(shape, out, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(shape, out, Op::MulScalar(a, c))
    }

    // ---- activations ----

    pub fn relu(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        self.push(shape, out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        self.push(shape, out, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(shape, out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(shape, out, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|x| x.ln()).collect();
        self.push(shape, out, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|x| x.sqrt()).collect();
        self.push(shape, out, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|x| x.abs()).collect();
        self.push(shape, out, Op::Abs(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|x| x.max(floor)).collect();
        self.push(shape, out, Op::ClampMin(a, floor))
    }

    // ---- row-wise ops over rank-1/rank-2 input (rank-1 == single row) ----

    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        assert!(cols > 0, "softmax over empty axis");
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(shape, out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        assert!(cols > 0, "log_softmax over empty axis");
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(shape, out, Op::LogSoftmax(a))
    }

    /// Per-row normalization to zero mean and unit variance (pre-affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(shape, out, Op::LayerNorm(a, eps))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects rank-2 tensors");
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        assert_eq!(k, k2, "matmul: inner dimensions disagree ({k} vs {k2})");
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let out = matmul_raw(va, vb, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let sa = self.nodes[a.0].shape.clone();
        assert_eq!(sa.len(), 2, "transpose expects a rank-2 tensor");
        let (m, n) = (sa[0], sa[1]);
        let va = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose(a))
    }

    // ---- convolutions over [C, T] signals ----

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        assert_eq!(sx.len(), 2, "conv1d input must be [C_in, T]");
        assert_eq!(sw.len(), 3, "conv1d weight must be [C_out, C_in, K]");
        assert!(stride >= 1, "conv1d stride must be >= 1");
        let (c_in, t) = (sx[0], sx[1]);
        let (c_out, c_in_w, k) = (sw[0], sw[1], sw[2]);
        assert_eq!(c_in, c_in_w, "conv1d: input channels {c_in} vs weight {c_in_w}");
        assert!(
            t + 2 * pad >= k,
            "conv1d: kernel {k} larger than padded input {}",
            t + 2 * pad
        );
        let t_out = (t + 2 * pad - k) / stride + 1;
        let out = conv1d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            c_in,
            t,
            c_out,
            k,
            stride,
            pad,
        );
        self.push(vec![c_out, t_out], out, Op::Conv1d { x, w, stride, pad })
    }

    /// Adjoint of conv1d with the same weight layout: maps a [C_out, T']
    /// signal back to [C_in, T''] with T'' = (T'-1)*stride - 2*pad + K.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        assert_eq!(sx.len(), 2, "conv_transpose1d input must be [C, T]");
        assert_eq!(sw.len(), 3, "conv_transpose1d weight must be [C_out, C_in, K]");
        assert!(stride >= 1, "conv_transpose1d stride must be >= 1");
        let (c1, t) = (sx[0], sx[1]);
        let (c_out_w, c_in_w, k) = (sw[0], sw[1], sw[2]);
        assert_eq!(c1, c_out_w, "conv_transpose1d: channels {c1} vs weight {c_out_w}");
        let t_out = (t - 1) * stride + k;
        assert!(t_out > 2 * pad, "conv_transpose1d: padding swallows the output");
        let t_out = t_out - 2 * pad;
        let out = convt1d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            c1,
            t,
            c_in_w,
            k,
            stride,
            pad,
            t_out,
        );
        self.push(vec![c_in_w, t_out], out, Op::ConvT1d { x, w, stride, pad })
    }

    pub fn avg_pool1d(&mut self, x: Var, factor: usize) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        assert_eq!(sx.len(), 2, "avg_pool1d input must be [C, T]");
        assert!(factor >= 1);
        let (c, t) = (sx[0], sx[1]);
        let t_out = t / factor;
        let vx = &self.nodes[x.0].value;
        let mut out = vec![0.0; c * t_out];
        for ch in 0..c {
            for to in 0..t_out {
                let mut acc = 0.0;
                for j in 0..factor {
                    acc += vx[ch * t + to * factor + j];
                }
                out[ch * t_out + to] = acc / factor as f64;
            }
        }
        self.push(vec![c, t_out], out, Op::AvgPool1d { x, factor })
    }

    // ---- gather / reshape ----

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let st = self.nodes[table.0].shape.clone();
        assert_eq!(st.len(), 2, "embedding table must be [V, d]");
        let (v, d) = (st[0], st[1]);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
        }
        let vt = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&vt[id * d..(id + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding { table, ids: ids.to_vec() },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].shape[0];
        let mut cols = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            assert_eq!(s.len(), 2, "concat_cols expects rank-2 tensors");
            assert_eq!(s[0], rows, "concat_cols: row mismatch");
            cols += s[1];
        }
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for p in parts {
            let pc = self.nodes[p.0].shape[1];
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                out[r * cols + off..r * cols + off + pc]
                    .copy_from_slice(&v[r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        self.push(vec![rows, cols], out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let s = self.nodes[x.0].shape.clone();
        assert_eq!(s.len(), 2, "slice_cols expects a rank-2 tensor");
        let (rows, cols) = (s[0], s[1]);
        assert!(start < end && end <= cols, "slice_cols range {start}..{end} out of {cols}");
        let w = end - start;
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w].copy_from_slice(&v[r * cols + start..r * cols + end]);
        }
        self.push(vec![rows, w], out, Op::SliceCols { x, start, end })
    }

    /// [m, n] + [n] broadcast along rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let (rows, cols) = rows_cols(&sx);
        assert_eq!(sb, vec![cols], "add_row: bias shape {sb:?} vs columns {cols}");
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        let out = vx
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb[i % cols])
            .collect();
        let _ = rows;
        self.push(sx, out, Op::AddRow { x, b })
    }

    /// [m, n] * [n] broadcast along rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        let ss = self.nodes[s.0].shape.clone();
        let (_, cols) = rows_cols(&sx);
        assert_eq!(ss, vec![cols], "mul_row: scale shape {ss:?} vs columns {cols}");
        let vx = &self.nodes[x.0].value;
        let vs = &self.nodes[s.0].value;
        let out = vx
            .iter()
            .enumerate()
            .map(|(i, v)| v * vs[i % cols])
            .collect();
        self.push(sx, out, Op::MulRow { x, s })
    }

    /// [C, T] + [C] broadcast along time (per-channel bias).
    pub fn add_chan(&mut self, x: Var, b: Var) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert_eq!(sx.len(), 2, "add_chan expects [C, T]");
        let (c, t) = (sx[0], sx[1]);
        assert_eq!(sb, vec![c], "add_chan: bias shape {sb:?} vs channels {c}");
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        let out = vx
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb[i / t])
            .collect();
        self.push(sx, out, Op::AddChan { x, b })
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        assert!(n > 0, "mean of an empty tensor");
        let s: f64 = self.nodes[a.0].value.iter().sum::<f64>() / n as f64;
        self.push(vec![], vec![s], Op::Mean(a))
    }

    // ---- special ----

    /// Forward identity; contributes zero gradient upstream.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let value = self.nodes[a.0].value.clone();
        self.push(shape, value, Op::StopGrad(a))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.nodes[a.0].value.clone();
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "reshape to {shape:?} does not preserve element count {}",
            value.len()
        );
        self.push(shape, value, Op::Reshape(a))
    }

    /// One-sided STFT magnitude of a rank-1 signal, shape [frames, bins].
    pub fn stft_magnitude(&mut self, x: Var, cfg: &StftConfig) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        assert_eq!(sx.len(), 1, "stft_magnitude expects a rank-1 signal");
        let mag = stft::magnitude(&self.nodes[x.0].value, cfg);
        let frames = cfg.num_frames(sx[0]);
        self.push(
            vec![frames, cfg.num_bins()],
            mag,
            Op::StftMag { x, cfg: *cfg },
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Two backward passes on identical
    /// graphs are bitwise identical: the sweep is a fixed reverse iteration.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let param_of = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf { param, .. } => param,
                _ => None,
            })
            .collect();
        Gradients { grads, param_of }
    }

    fn add_grad(&self, grads: &mut Vec<Option<Vec<f64>>>, v: Var, contrib: impl Fn(&mut [f64])) {
        // Skip leaves that opted out of gradient.
        if let Op::Leaf { requires_grad: false, .. } = self.nodes[v.0].op {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(grads, *b, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(grads, *b, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                self.add_grad(grads, *a, |acc| {
                    for ((x, y), v) in acc.iter_mut().zip(g).zip(vb) {
                        *x += y * v;
                    }
                });
                self.add_grad(grads, *b, |acc| {
                    for ((x, y), v) in acc.iter_mut().zip(g).zip(va) {
                        *x += y * v;
                    }
                });
            }
            Op::Div(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                self.add_grad(grads, *a, |acc| {
                    for ((x, y), d) in acc.iter_mut().zip(g).zip(vb) {
                        *x += y / d;
                    }
                });
                self.add_grad(grads, *b, |acc| {
                    for (j, (x, y)) in acc.iter_mut().zip(g).enumerate() {
                        *x -= y * va[j] / (vb[j] * vb[j]);
                    }
                });
            }
            Op::Neg(a) => {
                self.add_grad(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::AddScalar(a, _) => {
                self.add_grad(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                self.add_grad(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y * c;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                // dA = g . B^T
                self.add_grad(grads, *a, |acc| {
                    for i in 0..m {
                        for j in 0..k {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += g[i * n + l] * vb[j * n + l];
                            }
                            acc[i * k + j] += s;
                        }
                    }
                });
                // dB = A^T . g
                self.add_grad(grads, *b, |acc| {
                    for j in 0..k {
                        for l in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va[i * k + j] * g[i * n + l];
                            }
                            acc[j * n + l] += s;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                self.add_grad(grads, *a, |acc| {
                    for i in 0..n {
                        for j in 0..m {
                            acc[j * n + i] += g[i * m + j];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, stride, pad } => {
                let (c_in, t) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let (c_out, k) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[2]);
                let t_out = node.shape[1];
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                self.add_grad(grads, *x, |acc| {
                    conv1d_backward_input(acc, g, vw, c_in, t, c_out, k, *stride, *pad, t_out);
                });
                self.add_grad(grads, *w, |acc| {
                    conv1d_backward_weight(acc, g, vx, c_in, t, c_out, k, *stride, *pad, t_out);
                });
            }
            Op::ConvT1d { x, w, stride, pad } => {
                let (c1, t_in) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let (c2, k) = (node.shape[0], self.nodes[w.0].shape[2]);
                let t_out = node.shape[1];
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                // dY of convT(y, w) is conv1d(g, w) by adjointness.
                self.add_grad(grads, *x, |acc| {
                    for cin in 0..c1 {
                        for tp in 0..t_in {
                            let mut s = 0.0;
                            for c in 0..c2 {
                                for kk in 0..k {
                                    let ti = tp * *stride + kk;
                                    if ti >= *pad && ti - *pad < t_out {
                                        s += vw[(cin * c2 + c) * k + kk] * g[c * t_out + ti - *pad];
                                    }
                                }
                            }
                            acc[cin * t_in + tp] += s;
                        }
                    }
                });
                self.add_grad(grads, *w, |acc| {
                    for cin in 0..c1 {
                        for c in 0..c2 {
                            for kk in 0..k {
                                let mut s = 0.0;
                                for tp in 0..t_in {
                                    let ti = tp * *stride + kk;
                                    if ti >= *pad && ti - *pad < t_out {
                                        s += vx[cin * t_in + tp] * g[c * t_out + ti - *pad];
                                    }
                                }
                                acc[(cin * c2 + c) * k + kk] += s;
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = &self.nodes[a.0].value;
                self.add_grad(grads, *a, |acc| {
                    for (j, (x, y)) in acc.iter_mut().zip(g).enumerate() {
                        if va[j] > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let va = &self.nodes[a.0].value;
                let slope = *slope;
                self.add_grad(grads, *a, |acc| {
                    for (j, (x, y)) in acc.iter_mut().zip(g).enumerate() {
                        *x += if va[j] >= 0.0 { *y } else { y * slope };
                    }
                });
            }
            Op::Tanh(_) => {
                let vy = &node.value;
                if let Op::Tanh(a) = node.op {
                    self.add_grad(grads, a, |acc| {
                        for (j, (x, y)) in acc.iter_mut().zip(g).enumerate() {
                            *x += y * (1.0 - vy[j] * vy[j]);
                        }
                    });
                }
            }
            Op::Sigmoid(_) => {
                let vy = &node.value;
                if let Op::Sigmoid(a) = node.op {
                    self.add_grad(grads, a, |acc| {
                        for (j, (x, y)) in acc.iter_mut().zip(g).enumerate() {
                            *x += y * vy[j] * (1.0 - vy[j]);
                        }
                    });
                }
            }
            Op::Log(a) => {
                let va = &self.nodes[a.0].value;
                self.add_grad(grads, *a, |acc| {
                    for (j, (x, y)) in acc.iter_mut().zip(g).enumerate() {
                        *x += y / va[j];
                    }
                });
            }
            Op::Sqrt(_) => {
                let vy = &node.value;
                if let Op::Sqrt(a) = node.op {
                    self.add_grad(grads, a, |acc| {
                        for (j, (x, y)) in acc.iter_mut().zip(g).enumerate() {
                            *x += y / (2.0 * vy[j]);
                        }
                    });
                }
            }
            Op::Abs(a) => {
                let va = &self.nodes[a.0].value;
                self.add_grad(grads, *a, |acc| {
                    for (j, (x, y)) in acc.iter_mut().zip(g).enumerate() {
                        *x += y * va[j].signum() * if va[j] == 0.0 { 0.0 } else { 1.0 };
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let va = &self.nodes[a.0].value;
                let floor = *floor;
                self.add_grad(grads, *a, |acc| {
                    for (j, (x, y)) in acc.iter_mut().zip(g).enumerate() {
                        if va[j] >= floor {
                            *x += y;
                        }
                    }
                });
            }
            Op::Softmax(_) => {
                let vy = &node.value;
                let (rows, cols) = rows_cols(&node.shape);
                if let Op::Softmax(a) = node.op {
                    self.add_grad(grads, a, |acc| {
                        for r in 0..rows {
                            let y = &vy[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                acc[r * cols + j] += y[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(_) => {
                let vy = &node.value;
                let (rows, cols) = rows_cols(&node.shape);
                if let Op::LogSoftmax(a) = node.op {
                    self.add_grad(grads, a, |acc| {
                        for r in 0..rows {
                            let y = &vy[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let gsum: f64 = gr.iter().sum();
                            for j in 0..cols {
                                acc[r * cols + j] += gr[j] - y[j].exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm(a, eps) => {
                let va = &self.nodes[a.0].value;
                let (rows, cols) = rows_cols(&node.shape);
                let vy = &node.value;
                let eps = *eps;
                self.add_grad(grads, *a, |acc| {
                    for r in 0..rows {
                        let x = &va[r * cols..(r + 1) * cols];
                        let y = &vy[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean = x.iter().sum::<f64>() / cols as f64;
                        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean: f64 = gr.iter().sum::<f64>() / cols as f64;
                        let gydot: f64 =
                            gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            acc[r * cols + j] += inv * (gr[j] - gmean - y[j] * gydot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                self.add_grad(grads, *table, |acc| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            acc[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.add_grad(grads, *a, |acc| {
                    for x in acc.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g[0] / n;
                self.add_grad(grads, *a, |acc| {
                    for x in acc.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let cols = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let pc = self.nodes[p.0].shape[1];
                    self.add_grad(grads, *p, |acc| {
                        for r in 0..rows {
                            for j in 0..pc {
                                acc[r * pc + j] += g[r * cols + off + j];
                            }
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceCols { x, start, end } => {
                let cols = self.nodes[x.0].shape[1];
                let rows = node.shape[0];
                let w = end - start;
                self.add_grad(grads, *x, |acc| {
                    for r in 0..rows {
                        for j in 0..w {
                            acc[r * cols + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::AddRow { x, b } => {
                let (_, cols) = rows_cols(&node.shape);
                self.add_grad(grads, *x, |acc| {
                    for (v, y) in acc.iter_mut().zip(g) {
                        *v += y;
                    }
                });
                self.add_grad(grads, *b, |acc| {
                    for (j, y) in g.iter().enumerate() {
                        acc[j % cols] += y;
                    }
                });
            }
            Op::MulRow { x, s } => {
                let (_, cols) = rows_cols(&node.shape);
                let vx = &self.nodes[x.0].value;
                let vs = &self.nodes[s.0].value;
                self.add_grad(grads, *x, |acc| {
                    for (j, (v, y)) in acc.iter_mut().zip(g).enumerate() {
                        *v += y * vs[j % cols];
                    }
                });
                self.add_grad(grads, *s, |acc| {
                    for (j, y) in g.iter().enumerate() {
                        acc[j % cols] += y * vx[j];
                    }
                });
            }
            Op::AddChan { x, b } => {
                let t = node.shape[1];
                self.add_grad(grads, *x, |acc| {
                    for (v, y) in acc.iter_mut().zip(g) {
                        *v += y;
                    }
                });
                self.add_grad(grads, *b, |acc| {
                    for (j, y) in g.iter().enumerate() {
                        acc[j / t] += y;
                    }
                });
            }
            Op::AvgPool1d { x, factor } => {
                let t = self.nodes[x.0].shape[1];
                let t_out = node.shape[1];
                let f = *factor;
                self.add_grad(grads, *x, |acc| {
                    for c in 0..node.shape[0] {
                        for to in 0..t_out {
                            let gv = g[c * t_out + to] / f as f64;
                            for j in 0..f {
                                acc[c * t + to * f + j] += gv;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.add_grad(grads, *a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::StftMag { x, cfg } => {
                let vx = &self.nodes[x.0].value;
                let gx = stft::magnitude_backward(vx, cfg, g);
                self.add_grad(grads, *x, |acc| {
                    for (v, y) in acc.iter_mut().zip(&gx) {
                        *v += y;
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Conv1d { .. } => "conv1d",
        Op::ConvT1d { .. } => "conv_transpose1d",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Abs(..) => "abs",
        Op::ClampMin(..) => "clamp_min",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNorm(..) => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::AddRow { .. } => "add_row",
        Op::MulRow { .. } => "mul_row",
        Op::AddChan { .. } => "add_chan",
        Op::AvgPool1d { .. } => "avg_pool1d",
        Op::StopGrad(..) => "stop_gradient",
        Op::Reshape(..) => "reshape",
        Op::StftMag { .. } => "stft_magnitude",
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    c_in: usize,
    t: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let t_out = (t + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * t_out];
    for co in 0..c_out {
        for ci in 0..c_in {
            let wrow = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let xrow = &x[ci * t..(ci + 1) * t];
            for to in 0..t_out {
                let base = to * stride;
                let mut acc = 0.0;
                for (kk, &wv) in wrow.iter().enumerate() {
                    let ti = base + kk;
                    if ti >= pad && ti - pad < t {
                        acc += wv * xrow[ti - pad];
                    }
                }
                out[co * t_out + to] += acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_input(
    acc: &mut [f64],
    g: &[f64],
    w: &[f64],
    c_in: usize,
    t: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) {
    for co in 0..c_out {
        for ci in 0..c_in {
            let wrow = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            for to in 0..t_out {
                let gv = g[co * t_out + to];
                if gv == 0.0 {
                    continue;
                }
                let base = to * stride;
                for (kk, &wv) in wrow.iter().enumerate() {
                    let ti = base + kk;
                    if ti >= pad && ti - pad < t {
                        acc[ci * t + ti - pad] += wv * gv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_weight(
    acc: &mut [f64],
    g: &[f64],
    x: &[f64],
    c_in: usize,
    t: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) {
    for co in 0..c_out {
        for ci in 0..c_in {
            let xrow = &x[ci * t..(ci + 1) * t];
            for kk in 0..k {
                let mut s = 0.0;
                for to in 0..t_out {
                    let ti = to * stride + kk;
                    if ti >= pad && ti - pad < t {
                        s += xrow[ti - pad] * g[co * t_out + to];
                    }
                }
                acc[(co * c_in + ci) * k + kk] += s;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn convt1d_forward(
    y: &[f64],
    w: &[f64],
    c1: usize,
    t_in: usize,
    c2: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c2 * t_out];
    for cin in 0..c1 {
        for c in 0..c2 {
            let wrow = &w[(cin * c2 + c) * k..(cin * c2 + c + 1) * k];
            let yrow = &y[cin * t_in..(cin + 1) * t_in];
            for (tp, &yv) in yrow.iter().enumerate() {
                if yv == 0.0 {
                    continue;
                }
                let base = tp * stride;
                for (kk, &wv) in wrow.iter().enumerate() {
                    let ti = base + kk;
                    if ti >= pad && ti - pad < t_out {
                        out[c * t_out + ti - pad] += wv * yv;
                    }
                }
            }
        }
    }
    out
}
