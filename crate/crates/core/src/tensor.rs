//! Minimal reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays the nodes in reverse, accumulating gradients into every tensor
//! reachable from the loss. Storage is f32 throughout; every reduction
//! (matmul inner products, softmax denominators, layer-norm statistics,
//! losses) accumulates in f64 before rounding back to f32.
//!
//! One tape per training step, single-threaded; tensors that do not
//! participate in a tape are immutable after construction.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::{counter_uniform, mix, site_id};

/// Whether a forward pass applies dropout, and with which mask stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; masks derive from (run seed, dropout site, step).
    Train { seed: u64, step: u64 },
    Eval,
}

impl Mode {
    /// (training flag, mask seed) for a named dropout site.
    pub fn dropout_args(&self, site: &str) -> (bool, u64) {
        match self {
            Mode::Eval => (false, 0),
            Mode::Train { seed, step } => (true, mix(&[*seed, site_id(site), *step])),
        }
    }
}

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Floor applied inside the classification loss before taking logs.
pub const LOG_FLOOR: f32 = 1e-7;

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
}

/// Dense n-dimensional f32 value, optionally tracked for gradients.
///
/// Cloning is cheap (shared handle); the value buffer is only mutated by the
/// optimizer between tapes.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::build(shape, data, false))
    }

    /// Leaf tensor that the optimizer will update; participates in backward.
    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self {
            inner: Rc::new(TensorInner {
                shape: t.inner.shape.clone(),
                data: RefCell::new(t.to_vec()),
                grad: RefCell::new(None),
                requires_grad: true,
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::build(shape, vec![0.0; numel], false)
    }

    pub fn zeros_param(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::param(shape, vec![0.0; numel]).expect("zeros_param")
    }

    pub fn ones_param(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::param(shape, vec![1.0; numel]).expect("ones_param")
    }

    /// Parameter initialized from N(0, std²).
    pub fn normal_param(shape: Vec<usize>, std: f32, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| crate::rng::normal(rng, 0.0, std)).collect();
        Self::param(shape, data).expect("normal_param")
    }

    pub fn scalar(v: f32) -> Self {
        Self::build(vec![1], vec![v], false)
    }

    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Self {
        Self {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Scalar readout; panics if the tensor is not a single element.
    pub fn item(&self) -> f32 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place value update (optimizer steps, checkpoint restore).
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn set_data(&self, new: &[f32]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::Contract(format!(
                "set_data: expected {} values for shape {:?}, got {}",
                self.numel(),
                self.shape(),
                new.len()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    pub fn same_tensor(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn accumulate_grad(&self, delta: &[f32]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn seed_grad_ones(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![1.0; self.numel()]);
    }
}

enum Op {
    Matmul,
    Conv2d { stride: usize, padding: usize },
    Add,
    Sub,
    Mul,
    MulScalar(f32),
    AddRowBias,
    AddChanBias,
    Relu,
    Gelu,
    Sigmoid,
    Log,
    Square,
    SoftmaxLastDim,
    LayerNorm { stats: Vec<(f64, f64)> },
    Dropout { mask: Vec<f32> },
    Reshape,
    Transpose,
    NarrowCols { start: usize },
    ConcatRows { rows: Vec<usize> },
    ConcatCols { widths: Vec<usize> },
    Sum,
    ModCce { background: usize },
    ModMse { count: usize },
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Operation recorder for one forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op, inputs: Vec<Tensor>, out_shape: Vec<usize>, out_data: Vec<f32>) -> Tensor {
        let requires = inputs.iter().any(|t| t.requires_grad());
        let output = Tensor::build(out_shape, out_data, requires);
        self.nodes.borrow_mut().push(Node {
            op,
            inputs,
            output: output.clone(),
        });
        output
    }

    // ── linear algebra ─────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(dim_err("matmul", ash, bsh));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let out = matmul_raw(&a.data(), &b.data(), m, k, n);
        Ok(self.push(Op::Matmul, vec![a.clone(), b.clone()], vec![m, n], out))
    }

    pub fn conv2d(&self, x: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (xs, ks) = (x.shape(), kernels.shape());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(dim_err("conv2d", xs, ks));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(dim_err("conv2d", &[cin, ph, pw], ks));
        }
        let oh = (ph - kh) / stride + 1;
        let ow = (pw - kw) / stride + 1;

        let padded = pad_chw(&x.data(), cin, h, w, padding);
        let kd = kernels.data();
        let mut out = vec![0.0f32; cout * oh * ow];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..cin {
                        let kbase = ((oc * cin + ic) * kh) * kw;
                        let pbase = ic * ph * pw;
                        for ky in 0..kh {
                            let prow = pbase + (oy * stride + ky) * pw + ox * stride;
                            let krow = kbase + ky * kw;
                            for kx in 0..kw {
                                acc += padded[prow + kx] as f64 * kd[krow + kx] as f64;
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        Ok(self.push(
            Op::Conv2d { stride, padding },
            vec![x.clone(), kernels.clone()],
            vec![cout, oh, ow],
            out,
        ))
    }

    // ── elementwise ────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(dim_err("add", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add, vec![a.clone(), b.clone()], a.shape().to_vec(), out))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(dim_err("sub", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub, vec![a.clone(), b.clone()], a.shape().to_vec(), out))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(dim_err("mul", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul, vec![a.clone(), b.clone()], a.shape().to_vec(), out))
    }

    pub fn mul_scalar(&self, a: &Tensor, c: f32) -> Result<Tensor> {
        let out = a.data().iter().map(|x| x * c).collect();
        Ok(self.push(Op::MulScalar(c), vec![a.clone()], a.shape().to_vec(), out))
    }

    /// `x[n×d] + b[d]`, broadcasting the bias over rows.
    pub fn add_row_bias(&self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (xs, bs) = (x.shape(), b.shape());
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(dim_err("add_row_bias", xs, bs));
        }
        let d = xs[1];
        let bd = b.data();
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % d])
            .collect();
        Ok(self.push(Op::AddRowBias, vec![x.clone(), b.clone()], xs.to_vec(), out))
    }

    /// `x[c×h×w] + b[c]`, broadcasting the bias over each channel plane.
    pub fn add_chan_bias(&self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (xs, bs) = (x.shape(), b.shape());
        if xs.len() != 3 || bs.len() != 1 || bs[0] != xs[0] {
            return Err(dim_err("add_chan_bias", xs, bs));
        }
        let plane = xs[1] * xs[2];
        let bd = b.data();
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i / plane])
            .collect();
        Ok(self.push(Op::AddChanBias, vec![x.clone(), b.clone()], xs.to_vec(), out))
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let out = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Ok(self.push(Op::Relu, vec![x.clone()], x.shape().to_vec(), out))
    }

    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        let out = x.data().iter().map(|&v| gelu_fwd(v as f64) as f32).collect();
        Ok(self.push(Op::Gelu, vec![x.clone()], x.shape().to_vec(), out))
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        let out = x
            .data()
            .iter()
            .map(|&v| (1.0 / (1.0 + (-v as f64).exp())) as f32)
            .collect();
        Ok(self.push(Op::Sigmoid, vec![x.clone()], x.shape().to_vec(), out))
    }

    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = x.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("log requires strictly positive inputs, got {bad}"),
            });
        }
        let out = x.data().iter().map(|&v| (v as f64).ln() as f32).collect();
        Ok(self.push(Op::Log, vec![x.clone()], x.shape().to_vec(), out))
    }

    pub fn square(&self, x: &Tensor) -> Result<Tensor> {
        let out = x.data().iter().map(|&v| v * v).collect();
        Ok(self.push(Op::Square, vec![x.clone()], x.shape().to_vec(), out))
    }

    // ── normalization / regularization ─────────────────────────────

    /// Softmax over the last dimension, max-subtracted for stability.
    pub fn softmax_lastdim(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let k = *shape.last().ok_or_else(|| Error::Contract("softmax on 0-d tensor".into()))?;
        if k == 0 {
            return Err(Error::Contract("softmax over empty last dimension".into()));
        }
        let xd = x.data();
        let mut out = vec![0.0f32; xd.len()];
        for (row_out, row_in) in out.chunks_mut(k).zip(xd.chunks(k)) {
            softmax_row(row_in, row_out);
        }
        drop(xd);
        Ok(self.push(Op::SoftmaxLastDim, vec![x.clone()], shape, out))
    }

    /// Per-slice normalization over the last dimension followed by an affine
    /// transform with `gamma`/`beta`.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::Contract("layer_norm on 0-d tensor".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(dim_err("layer_norm", &shape, gamma.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0f32; xd.len()];
        let mut stats = Vec::with_capacity(xd.len() / d);
        for (row_out, row_in) in out.chunks_mut(d).zip(xd.chunks(d)) {
            let mean = row_in.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row_in.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps as f64).sqrt();
            stats.push((mean, inv_std));
            for j in 0..d {
                let xhat = (row_in[j] as f64 - mean) * inv_std;
                row_out[j] = (xhat * gd[j] as f64 + bd[j] as f64) as f32;
            }
        }
        drop((xd, gd, bd));
        Ok(self.push(
            Op::LayerNorm { stats },
            vec![x.clone(), gamma.clone(), beta.clone()],
            shape,
            out,
        ))
    }

    /// Inverted dropout. Training mode zeroes each element with probability
    /// `rate` and scales survivors by `1/(1-rate)`; eval mode is the
    /// identity. The mask depends only on `seed` and the element index.
    pub fn dropout(&self, x: &Tensor, rate: f32, training: bool, seed: u64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            let out = x.to_vec();
            let mask = vec![1.0; out.len()];
            return Ok(self.push(Op::Dropout { mask }, vec![x.clone()], x.shape().to_vec(), out));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let xd = x.data();
        let mut out = vec![0.0f32; xd.len()];
        let mut mask = vec![0.0f32; xd.len()];
        for i in 0..xd.len() {
            if counter_uniform(seed, i as u64) >= rate {
                mask[i] = keep_scale;
                out[i] = xd[i] * keep_scale;
            }
        }
        drop(xd);
        Ok(self.push(Op::Dropout { mask }, vec![x.clone()], x.shape().to_vec(), out))
    }

    // ── shape plumbing ─────────────────────────────────────────────

    pub fn reshape(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(dim_err("reshape", x.shape(), &shape));
        }
        let out = x.to_vec();
        Ok(self.push(Op::Reshape, vec![x.clone()], shape, out))
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(dim_err("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let xd = x.data();
        let mut out = vec![0.0f32; xd.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        drop(xd);
        Ok(self.push(Op::Transpose, vec![x.clone()], vec![c, r], out))
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn narrow_cols(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(dim_err("narrow_cols", s, &[start, len]));
        }
        let (r, c) = (s[0], s[1]);
        let xd = x.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        drop(xd);
        Ok(self.push(Op::NarrowCols { start }, vec![x.clone()], vec![r, len], out))
    }

    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let cols = parts[0].shape().get(1).copied().unwrap_or(0);
        let mut rows = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != cols {
                return Err(dim_err("concat_rows", parts[0].shape(), s));
            }
            rows.push(s[0]);
            out.extend_from_slice(&p.data());
        }
        let total: usize = rows.iter().sum();
        Ok(self.push(Op::ConcatRows { rows }, parts.to_vec(), vec![total, cols], out))
    }

    pub fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let r = parts[0].shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != r {
                return Err(dim_err("concat_cols", parts[0].shape(), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let w = p.shape()[1];
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols { widths }, parts.to_vec(), vec![r, total], out))
    }

    /// Full reduction to a single element (f64 accumulation).
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        Ok(self.push(Op::Sum, vec![x.clone()], vec![1], vec![s as f32]))
    }

    // ── losses (background-aware, see loss module for the reports) ──

    /// Cross-entropy summed over rows whose true class is not `background`;
    /// rows are one-hot distributions over the last dimension. Background
    /// rows are skipped entirely, so appending them cannot change the result.
    pub fn modified_cce(&self, y_true: &Tensor, y_pred: &Tensor, background: usize) -> Result<Tensor> {
        let (ts, ps) = (y_true.shape(), y_pred.shape());
        if ts != ps || ts.len() != 2 {
            return Err(dim_err("modified_cce", ts, ps));
        }
        let c = ts[1];
        if background >= c {
            return Err(Error::Contract(format!(
                "background index {background} out of range for {c} classes"
            )));
        }
        let td = y_true.data();
        let pd = y_pred.data();
        let mut loss = 0.0f64;
        for (trow, prow) in td.chunks(c).zip(pd.chunks(c)) {
            if argmax(trow) == background {
                continue;
            }
            let mut row_loss = 0.0f64;
            for m in 0..c {
                if trow[m] != 0.0 {
                    row_loss += trow[m] as f64 * (prow[m].max(LOG_FLOOR) as f64).ln();
                }
            }
            loss -= row_loss;
        }
        drop((td, pd));
        Ok(self.push(
            Op::ModCce { background },
            vec![y_true.clone(), y_pred.clone()],
            vec![1],
            vec![loss as f32],
        ))
    }

    /// Sum of squared errors over rows whose true offsets are not all zero,
    /// divided by the count of such rows (0 when no row qualifies).
    pub fn modified_mse(&self, y_true: &Tensor, y_pred: &Tensor) -> Result<Tensor> {
        let (ts, ps) = (y_true.shape(), y_pred.shape());
        if ts != ps || ts.len() != 2 {
            return Err(dim_err("modified_mse", ts, ps));
        }
        let k = ts[1];
        let td = y_true.data();
        let pd = y_pred.data();
        let mut loss = 0.0f64;
        let mut count = 0usize;
        for (trow, prow) in td.chunks(k).zip(pd.chunks(k)) {
            let row_sum: f64 = trow.iter().map(|&v| v as f64).sum();
            if row_sum == 0.0 {
                continue;
            }
            for m in 0..k {
                let d = trow[m] as f64 - prow[m] as f64;
                loss += d * d;
            }
            count += 1;
        }
        drop((td, pd));
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        Ok(self.push(
            Op::ModMse { count },
            vec![y_true.clone(), y_pred.clone()],
            vec![1],
            vec![value as f32],
        ))
    }

    /// Dense layer: `x·w + b` (two recorded nodes).
    pub fn linear(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let prod = self.matmul(x, w)?;
        self.add_row_bias(&prod, b)
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each recorded node exactly
    /// once, in reverse order of recording; gradients accumulate additively
    /// across uses.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        loss.seed_grad_ones();
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            let g = match node.output.grad() {
                Some(g) => g,
                None => continue, // branch not reachable from the loss
            };
            backprop_node(node, &g);
        }
        Ok(())
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_row(row_in: &[f32], row_out: &mut [f32]) {
    let max = row_in.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut denom = 0.0f64;
    let mut exps = vec![0.0f64; row_in.len()];
    for (e, &v) in exps.iter_mut().zip(row_in) {
        *e = (v as f64 - max).exp();
        denom += *e;
    }
    for (o, e) in row_out.iter_mut().zip(exps) {
        *o = (e / denom) as f32;
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// `a[m×k] · b[k×n]` with f64 row accumulators.
fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut acc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn pad_chw(x: &[f32], c: usize, h: usize, w: usize, p: usize) -> Vec<f32> {
    if p == 0 {
        return x.to_vec();
    }
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0f32; c * ph * pw];
    for ic in 0..c {
        for y in 0..h {
            let src = ic * h * w + y * w;
            let dst = ic * ph * pw + (y + p) * pw + p;
            out[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
    out
}

fn backprop_node(node: &Node, g: &[f32]) {
    match &node.op {
        Op::Matmul => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            // da = g · bᵀ
            let mut da = vec![0.0f64; m * k];
            {
                let bd = b.data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let drow = &mut da[i * k..(i + 1) * k];
                    for (p, dv) in drow.iter_mut().enumerate() {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = 0.0f64;
                        for (gv, bv) in grow.iter().zip(brow) {
                            acc += *gv as f64 * *bv as f64;
                        }
                        *dv = acc;
                    }
                }
            }
            // db = aᵀ · g
            let mut db = vec![0.0f64; k * n];
            {
                let ad = a.data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p] as f64;
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += av * *gv as f64;
                        }
                    }
                }
            }
            a.accumulate_grad(&da.iter().map(|&v| v as f32).collect::<Vec<_>>());
            b.accumulate_grad(&db.iter().map(|&v| v as f32).collect::<Vec<_>>());
        }
        Op::Conv2d { stride, padding } => {
            let x = &node.inputs[0];
            let kern = &node.inputs[1];
            let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (cout, kh, kw) = (kern.shape()[0], kern.shape()[2], kern.shape()[3]);
            let (oh, ow) = (node.output.shape()[1], node.output.shape()[2]);
            let (ph, pw) = (h + 2 * padding, w + 2 * padding);
            let padded = pad_chw(&x.data(), cin, h, w, *padding);
            let kd = kern.data();
            let mut dpad = vec![0.0f64; cin * ph * pw];
            let mut dk = vec![0.0f64; kd.len()];
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(oc * oh + oy) * ow + ox] as f64;
                        if gv == 0.0 {
                            continue;
                        }
                        for ic in 0..cin {
                            let kbase = ((oc * cin + ic) * kh) * kw;
                            let pbase = ic * ph * pw;
                            for ky in 0..kh {
                                let prow = pbase + (oy * stride + ky) * pw + ox * stride;
                                let krow = kbase + ky * kw;
                                for kx in 0..kw {
                                    dpad[prow + kx] += kd[krow + kx] as f64 * gv;
                                    dk[krow + kx] += padded[prow + kx] as f64 * gv;
                                }
                            }
                        }
                    }
                }
            }
            drop(kd);
            // crop the padding back off
            let mut dx = vec![0.0f32; cin * h * w];
            for ic in 0..cin {
                for y in 0..h {
                    for xw in 0..w {
                        dx[ic * h * w + y * w + xw] =
                            dpad[ic * ph * pw + (y + padding) * pw + (xw + padding)] as f32;
                    }
                }
            }
            x.accumulate_grad(&dx);
            kern.accumulate_grad(&dk.iter().map(|&v| v as f32).collect::<Vec<_>>());
        }
        Op::Add => {
            node.inputs[0].accumulate_grad(g);
            node.inputs[1].accumulate_grad(g);
        }
        Op::Sub => {
            node.inputs[0].accumulate_grad(g);
            let neg: Vec<f32> = g.iter().map(|v| -v).collect();
            node.inputs[1].accumulate_grad(&neg);
        }
        Op::Mul => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            let da: Vec<f32> = g.iter().zip(b.data().iter()).map(|(gv, bv)| gv * bv).collect();
            let db: Vec<f32> = g.iter().zip(a.data().iter()).map(|(gv, av)| gv * av).collect();
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::MulScalar(c) => {
            let d: Vec<f32> = g.iter().map(|v| v * c).collect();
            node.inputs[0].accumulate_grad(&d);
        }
        Op::AddRowBias => {
            let x = &node.inputs[0];
            let b = &node.inputs[1];
            let d = x.shape()[1];
            x.accumulate_grad(g);
            let mut db = vec![0.0f64; d];
            for (i, gv) in g.iter().enumerate() {
                db[i % d] += *gv as f64;
            }
            b.accumulate_grad(&db.iter().map(|&v| v as f32).collect::<Vec<_>>());
        }
        Op::AddChanBias => {
            let x = &node.inputs[0];
            let b = &node.inputs[1];
            let plane = x.shape()[1] * x.shape()[2];
            x.accumulate_grad(g);
            let mut db = vec![0.0f64; x.shape()[0]];
            for (i, gv) in g.iter().enumerate() {
                db[i / plane] += *gv as f64;
            }
            b.accumulate_grad(&db.iter().map(|&v| v as f32).collect::<Vec<_>>());
        }
        Op::Relu => {
            let x = &node.inputs[0];
            let d: Vec<f32> = g
                .iter()
                .zip(x.data().iter())
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect();
            x.accumulate_grad(&d);
        }
        Op::Gelu => {
            let x = &node.inputs[0];
            let d: Vec<f32> = g
                .iter()
                .zip(x.data().iter())
                .map(|(gv, &xv)| (*gv as f64 * gelu_grad(xv as f64)) as f32)
                .collect();
            x.accumulate_grad(&d);
        }
        Op::Sigmoid => {
            let x = &node.inputs[0];
            let out = node.output.data();
            let d: Vec<f32> = g
                .iter()
                .zip(out.iter())
                .map(|(gv, &s)| gv * s * (1.0 - s))
                .collect();
            drop(out);
            x.accumulate_grad(&d);
        }
        Op::Log => {
            let x = &node.inputs[0];
            let d: Vec<f32> = g.iter().zip(x.data().iter()).map(|(gv, &xv)| gv / xv).collect();
            x.accumulate_grad(&d);
        }
        Op::Square => {
            let x = &node.inputs[0];
            let d: Vec<f32> = g
                .iter()
                .zip(x.data().iter())
                .map(|(gv, &xv)| 2.0 * gv * xv)
                .collect();
            x.accumulate_grad(&d);
        }
        Op::SoftmaxLastDim => {
            let x = &node.inputs[0];
            let k = *node.output.shape().last().unwrap();
            let out = node.output.data();
            let mut d = vec![0.0f32; g.len()];
            for ((drow, grow), prow) in d.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                let dot: f64 = grow
                    .iter()
                    .zip(prow)
                    .map(|(gv, pv)| *gv as f64 * *pv as f64)
                    .sum();
                for j in 0..k {
                    drow[j] = (prow[j] as f64 * (grow[j] as f64 - dot)) as f32;
                }
            }
            drop(out);
            x.accumulate_grad(&d);
        }
        Op::LayerNorm { stats } => {
            let x = &node.inputs[0];
            let gamma = &node.inputs[1];
            let beta = &node.inputs[2];
            let d = gamma.shape()[0];
            let xd = x.data();
            let gd = gamma.data();
            let mut dx = vec![0.0f32; xd.len()];
            let mut dgamma = vec![0.0f64; d];
            let mut dbeta = vec![0.0f64; d];
            for (row, ((xrow, grow), &(mean, inv_std))) in
                xd.chunks(d).zip(g.chunks(d)).zip(stats.iter()).enumerate()
            {
                let dxrow = &mut dx[row * d..(row + 1) * d];
                let mut sum_dxhat = 0.0f64;
                let mut sum_dxhat_xhat = 0.0f64;
                let mut xhat = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                for j in 0..d {
                    xhat[j] = (xrow[j] as f64 - mean) * inv_std;
                    dxhat[j] = grow[j] as f64 * gd[j] as f64;
                    sum_dxhat += dxhat[j];
                    sum_dxhat_xhat += dxhat[j] * xhat[j];
                    dgamma[j] += grow[j] as f64 * xhat[j];
                    dbeta[j] += grow[j] as f64;
                }
                let n = d as f64;
                for j in 0..d {
                    dxrow[j] = (inv_std * (dxhat[j] - sum_dxhat / n - xhat[j] * sum_dxhat_xhat / n)) as f32;
                }
            }
            drop((xd, gd));
            x.accumulate_grad(&dx);
            gamma.accumulate_grad(&dgamma.iter().map(|&v| v as f32).collect::<Vec<_>>());
            beta.accumulate_grad(&dbeta.iter().map(|&v| v as f32).collect::<Vec<_>>());
        }
        Op::Dropout { mask } => {
            let d: Vec<f32> = g.iter().zip(mask).map(|(gv, mv)| gv * mv).collect();
            node.inputs[0].accumulate_grad(&d);
        }
        Op::Reshape => node.inputs[0].accumulate_grad(g),
        Op::Transpose => {
            let x = &node.inputs[0];
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut d = vec![0.0f32; g.len()];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g[j * r + i];
                }
            }
            x.accumulate_grad(&d);
        }
        Op::NarrowCols { start } => {
            let x = &node.inputs[0];
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let len = node.output.shape()[1];
            let mut d = vec![0.0f32; r * c];
            for i in 0..r {
                d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            x.accumulate_grad(&d);
        }
        Op::ConcatRows { rows } => {
            let cols = node.output.shape()[1];
            let mut offset = 0;
            for (input, &r) in node.inputs.iter().zip(rows) {
                input.accumulate_grad(&g[offset..offset + r * cols]);
                offset += r * cols;
            }
        }
        Op::ConcatCols { widths } => {
            let r = node.output.shape()[0];
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (input, &w) in node.inputs.iter().zip(widths) {
                let mut d = vec![0.0f32; r * w];
                for i in 0..r {
                    d[i * w..(i + 1) * w].copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                }
                input.accumulate_grad(&d);
                offset += w;
            }
        }
        Op::Sum => {
            let gv = g[0];
            let d = vec![gv; node.inputs[0].numel()];
            node.inputs[0].accumulate_grad(&d);
        }
        Op::ModCce { background } => {
            // targets are constants; gradient flows to predictions only
            let y_true = &node.inputs[0];
            let y_pred = &node.inputs[1];
            let c = y_true.shape()[1];
            let gv = g[0];
            let td = y_true.data();
            let pd = y_pred.data();
            let mut d = vec![0.0f32; pd.len()];
            for (row, (trow, prow)) in td.chunks(c).zip(pd.chunks(c)).enumerate() {
                if argmax(trow) == *background {
                    continue;
                }
                for m in 0..c {
                    if trow[m] != 0.0 && prow[m] > LOG_FLOOR {
                        d[row * c + m] = gv * (-(trow[m] as f64) / prow[m] as f64) as f32;
                    }
                }
            }
            drop((td, pd));
            y_pred.accumulate_grad(&d);
        }
        Op::ModMse { count } => {
            let y_true = &node.inputs[0];
            let y_pred = &node.inputs[1];
            if *count == 0 {
                // no matched rows: the gradient is identically zero, but the
                // backward contract still populates it
                y_pred.accumulate_grad(&vec![0.0; y_pred.numel()]);
                return;
            }
            let k = y_true.shape()[1];
            let gv = g[0] as f64;
            let td = y_true.data();
            let pd = y_pred.data();
            let mut d = vec![0.0f32; pd.len()];
            for (row, (trow, prow)) in td.chunks(k).zip(pd.chunks(k)).enumerate() {
                let row_sum: f64 = trow.iter().map(|&v| v as f64).sum();
                if row_sum == 0.0 {
                    continue;
                }
                for m in 0..k {
                    let diff = prow[m] as f64 - trow[m] as f64;
                    d[row * k + m] = (gv * 2.0 * diff / *count as f64) as f32;
                }
            }
            drop((td, pd));
            y_pred.accumulate_grad(&d);
        }
    }
}
