//! Reverse-mode differentiation over an append-only node list.
//!
//! Every operation appends a node whose inputs already exist, so node order is
//! a topological order and backward is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::conv::{self, ConvGrads, Window};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Neg(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, n: usize, k: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, win: Window, c_out: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, win: Window, c_in: usize },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Clamp { x: Var, lo: T, hi: T },
    Minimum(Var, Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T> },
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    RowDot(Var, Var),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    PickCols { x: Var, idx: Vec<usize> },
    Reshape(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Neg(..) => "neg",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::RowDot(..) => "row_dot",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::PickCols { .. } => "pick_cols",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Minimum(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Neg(x)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softplus(x)
            | Op::Square(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumCols(x)
            | Op::Reshape(x) => vec![*x],
            Op::Clamp { x, .. }
            | Op::L2NormalizeRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::PickCols { x, .. } => vec![*x],
            Op::Linear { x, w, b }
            | Op::Conv2d { x, w, b, .. }
            | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recorded computation for one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
    first_nonfinite: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn stable_softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            frozen: HashMap::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(op.name());
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some("leaf");
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(t), true)
    }

    /// Trainable parameter. Binding the same parameter twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.value_arc(id), true);
        self.bound.insert(id, v);
        v
    }

    /// Parameter used as a constant (target networks, frozen critics).
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.frozen.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.value_arc(id), false);
        self.frozen.insert(id, v);
        v
    }

    /// Same value, gradient flow stopped.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_leaf(value, false)
    }

    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Error if any forward value so far was NaN or infinite.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        self.push(out, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = zip_map(self.data(a), self.data(b), f);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), stable_softplus)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// `x + b` with `b` broadcast along the leading axes (`b` matches the last axis).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let m = *self.shape(x).last().unwrap();
        if self.value(b).len() != m {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let bd = self.data(b);
        let data: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % m])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, b)))
    }

    /// `x * s` with `s` broadcast along the leading axes.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let m = *self.shape(x).last().unwrap();
        if self.value(s).len() != m {
            return Err(Error::dim(
                "mul_row",
                format!("{:?} * {:?}", self.shape(x), self.shape(s)),
            ));
        }
        let sd = self.data(s);
        let data: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i % m])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::MulRow(x, s)))
    }

    /// `op(a) * op(b)` for matrices, `op` optionally transposing.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents differ: {:?} x {:?} (ta={ta}, tb={tb})", [ar, ac], [br, bc]),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(ta, tb, m, n, k, T::one(), self.data(a), self.data(b), T::zero(), &mut out);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, ta, tb, m, n, k },
        ))
    }

    /// `x W^T + b` with `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.dims2(x, "linear")?;
        let (dout, win) = self.dims2(w, "linear")?;
        if din != win {
            return Err(Error::dim(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} vs weight {:?}", self.shape(b), self.shape(w)),
                ));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(false, true, n, dout, din, T::one(), self.data(x), self.data(w), beta, &mut out);
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }))
    }

    /// Valid 2-D convolution. `x: [B, C, H, W]` (or `[C, H, W]`), `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, wd) = match xs[..] {
            [bt, c, h, w] => (bt, c, h, w),
            [c, h, w] => (1, c, h, w),
            _ => return Err(Error::dim("conv2d", format!("input shape {xs:?}"))),
        };
        let ws = self.shape(w).to_vec();
        let [c_out, wc, k, k2] = ws[..] else {
            return Err(Error::dim("conv2d", format!("weight shape {ws:?}")));
        };
        if wc != c || k != k2 || k > h || k > wd || stride == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(Error::dim("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let win = Window {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            out_h: conv::conv_out_extent(h, k, stride),
            out_w: conv::conv_out_extent(wd, k, stride),
        };
        let mut out = vec![T::zero(); batch * c_out * win.positions()];
        conv::conv2d_forward(
            self.data(x),
            batch,
            &win,
            self.data(w),
            b.map(|b| self.data(b)),
            c_out,
            &mut out,
        );
        let shape = if xs.len() == 4 {
            vec![batch, c_out, win.out_h, win.out_w]
        } else {
            vec![c_out, win.out_h, win.out_w]
        };
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, win, c_out }))
    }

    /// Transposed convolution. `x: [B, C_in, H, W]`, `w: [C_in, C_out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [batch, c_in, h, wd] = xs[..] else {
            return Err(Error::dim("conv_transpose2d", format!("input shape {xs:?}")));
        };
        let ws = self.shape(w).to_vec();
        let [wc, c_out, k, k2] = ws[..] else {
            return Err(Error::dim("conv_transpose2d", format!("weight shape {ws:?}")));
        };
        if wc != c_in || k != k2 || stride == 0 || output_padding >= stride {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input {xs:?}, weight {ws:?}, stride {stride}, output_padding {output_padding}"),
            ));
        }
        let win = Window {
            channels: c_out,
            height: conv::conv_transpose_out_extent(h, k, stride, output_padding),
            width: conv::conv_transpose_out_extent(wd, k, stride, output_padding),
            kernel: k,
            stride,
            out_h: h,
            out_w: wd,
        };
        let mut out = vec![T::zero(); batch * win.image_len()];
        conv::conv_transpose_forward(
            self.data(x),
            batch,
            c_in,
            &win,
            self.data(w),
            b.map(|b| self.data(b)),
            &mut out,
        );
        let shape = vec![batch, c_out, win.height, win.width];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ConvTranspose2d { x, w, b, win, c_in },
        ))
    }

    /// Layer normalization over the last axis followed by `gain * xhat + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let m = *self.shape(x).last().unwrap();
        if m < 2 {
            return Err(Error::dim("layer_norm", format!("last axis has length {m}")));
        }
        if self.value(gain).len() != m || self.value(shift).len() != m {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, shift {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(shift)
                ),
            ));
        }
        let xd = self.data(x);
        let (gd, sd) = (self.data(gain), self.data(shift));
        let rows = xd.len() / m;
        let mf = T::from_usize(m).unwrap();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * m..(r + 1) * m];
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..m {
                let xh = (row[j] - mean) * rs;
                xhat[r * m + j] = xh;
                out[r * m + j] = xh * gd[j] + sd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, shift, xhat, rstd },
        ))
    }

    /// Row-wise log-softmax of a matrix (max-subtracted).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.dims2(x, "log_softmax")?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::from_usize(d.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Row sums of a matrix, shape `[n, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "sum_cols")?;
        let out: Vec<T> = self.data(x).chunks(m).map(|r| r.iter().copied().sum()).collect();
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::SumCols(x)))
    }

    /// Per-row inner products of two equally shaped matrices, shape `[n, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (n, m) = self.dims2(a, "row_dot")?;
        let out: Vec<T> = self
            .data(a)
            .chunks(m)
            .zip(self.data(b).chunks(m))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::RowDot(a, b)))
    }

    /// Scale each row to unit Euclidean norm. Exact zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.dims2(x, "l2_normalize_rows")?;
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / m);
        for row in out.chunks_mut(m) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nrm == T::zero() {
                return Err(Error::ZeroNorm);
            }
            for v in row.iter_mut() {
                *v = *v / nrm;
            }
            norms.push(nrm);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::L2NormalizeRows { x, norms }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(Error::dim("concat_cols", format!("row counts {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{:?} vs trailing {tail:?}", s),
                ));
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start + len > s[0] || len == 0 {
            return Err(Error::dim("slice_rows", format!("{start}+{len} of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let out = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims2(x, "slice_cols")?;
        if start + len > m || len == 0 {
            return Err(Error::dim("slice_cols", format!("{start}+{len} of {m} columns")));
        }
        let out: Vec<T> = self
            .data(x)
            .chunks(m)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }))
    }

    /// Select leading-axis entries by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= s[0] {
                return Err(Error::dim("gather_rows", format!("index {i} of {s:?}")));
            }
            out.extend_from_slice(&self.data(x)[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
        ))
    }

    /// `out[r] = x[r, idx[r]]`, shape `[n, 1]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.dims2(x, "pick_cols")?;
        if idx.len() != n || idx.iter().any(|&c| c >= m) {
            return Err(Error::dim("pick_cols", format!("indices {idx:?} for [{n}, {m}]")));
        }
        let d = self.data(x);
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &c)| d[r * m + c]).collect();
        Ok(self.push(
            Tensor::new(vec![n, 1], out)?,
            Op::PickCols { x, idx: idx.to_vec() },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar loss (seed gradient 1).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "loss".to_string(),
            });
        }
        self.backward_seeded(loss, vec![T::one()])
    }

    /// Reverse sweep with an explicit seed gradient for `output`.
    pub fn backward_from(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::dim(
                "backward_from",
                format!("seed {:?} for output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        self.backward_seeded(output, seed.data().to_vec())
    }

    fn backward_seeded(&self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for inp in node.op.inputs() {
                if inp.0 >= i {
                    return Err(Error::GraphCycle { node: i, input: inp.0 });
                }
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        // Accumulate into the gradient slot of `v` if it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((d, &gv), &o) in s.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, &gv), &o) in s.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
            }
            Op::Neg(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
                acc(*b, &mut |s| {
                    let m = s.len();
                    for (j, &gv) in g.iter().enumerate() {
                        s[j % m] += gv;
                    }
                });
            }
            Op::MulRow(x, sc) => {
                let (xv, sv) = (val(*x), val(*sc));
                let m = sv.len();
                acc(*x, &mut |s| {
                    for (j, (d, &gv)) in s.iter_mut().zip(g).enumerate() {
                        *d += gv * sv[j % m];
                    }
                });
                acc(*sc, &mut |s| {
                    for (j, &gv) in g.iter().enumerate() {
                        s[j % m] += gv * xv[j];
                    }
                });
            }
            Op::MatMul { a, b, ta, tb, m, n, k } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n, k, ta, tb) = (*m, *n, *k, *ta, *tb);
                acc(*a, &mut |s| {
                    if !ta {
                        gemm(false, !tb, m, k, n, T::one(), g, bv, T::one(), s);
                    } else {
                        gemm(tb, true, k, m, n, T::one(), bv, g, T::one(), s);
                    }
                });
                acc(*b, &mut |s| {
                    if !tb {
                        gemm(!ta, false, k, n, m, T::one(), av, g, T::one(), s);
                    } else {
                        gemm(true, ta, n, k, m, T::one(), g, av, T::one(), s);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let dout = nodes[w.0].value.shape()[0];
                let din = nodes[w.0].value.shape()[1];
                let n = xv.len() / din;
                acc(*x, &mut |s| gemm(false, false, n, din, dout, T::one(), g, wv, T::one(), s));
                acc(*w, &mut |s| gemm(true, false, dout, din, n, T::one(), g, xv, T::one(), s));
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for row in g.chunks(dout) {
                            s.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, win, c_out } => {
                let batch = nodes[x.0].value.len() / win.image_len();
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = nodes[x.0].requires_grad.then(|| vec![T::zero(); xv.len()]);
                let mut dw = nodes[w.0].requires_grad.then(|| vec![T::zero(); wv.len()]);
                let mut db = b
                    .filter(|b| nodes[b.0].requires_grad)
                    .map(|_| vec![T::zero(); *c_out]);
                conv::conv2d_backward(
                    xv,
                    batch,
                    win,
                    wv,
                    *c_out,
                    g,
                    ConvGrads {
                        input: dx.as_deref_mut(),
                        weight: dw.as_deref_mut(),
                        bias: db.as_deref_mut(),
                    },
                );
                add_into(&mut acc, *x, dx);
                add_into(&mut acc, *w, dw);
                if let Some(b) = b {
                    add_into(&mut acc, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, win, c_in } => {
                let batch = nodes[x.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = nodes[x.0].requires_grad.then(|| vec![T::zero(); xv.len()]);
                let mut dw = nodes[w.0].requires_grad.then(|| vec![T::zero(); wv.len()]);
                let mut db = b
                    .filter(|b| nodes[b.0].requires_grad)
                    .map(|_| vec![T::zero(); win.channels]);
                conv::conv_transpose_backward(
                    xv,
                    batch,
                    *c_in,
                    win,
                    wv,
                    g,
                    ConvGrads {
                        input: dx.as_deref_mut(),
                        weight: dw.as_deref_mut(),
                        bias: db.as_deref_mut(),
                    },
                );
                add_into(&mut acc, *x, dx);
                add_into(&mut acc, *w, dw);
                if let Some(b) = b {
                    add_into(&mut acc, *b, db);
                }
            }
            Op::Relu(x) => acc(*x, &mut |s| {
                for ((d, &gv), &o) in s.iter_mut().zip(g).zip(y) {
                    if o > T::zero() {
                        *d += gv;
                    }
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |s| {
                for ((d, &gv), &o) in s.iter_mut().zip(g).zip(y) {
                    *d += gv * (T::one() - o * o);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |s| {
                for ((d, &gv), &o) in s.iter_mut().zip(g).zip(y) {
                    *d += gv * o;
                }
            }),
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((d, &gv), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *d += gv / xi;
                    }
                })
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((d, &gv), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *d += gv * sigmoid(xi);
                    }
                })
            }
            Op::Square(x) => {
                let xv = val(*x);
                let two = T::from_f64_lossy(2.0);
                acc(*x, &mut |s| {
                    for ((d, &gv), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *d += two * gv * xi;
                    }
                })
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((d, &gv), &xi) in s.iter_mut().zip(g).zip(xv) {
                        if xi >= *lo && xi <= *hi {
                            *d += gv;
                        }
                    }
                })
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for (j, d) in s.iter_mut().enumerate() {
                        if av[j] <= bv[j] {
                            *d += g[j];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for (j, d) in s.iter_mut().enumerate() {
                        if av[j] > bv[j] {
                            *d += g[j];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let gd = val(*gain);
                let m = gd.len();
                let mf = T::from_usize(m).unwrap();
                acc(*shift, &mut |s| {
                    for row in g.chunks(m) {
                        s.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                    }
                });
                acc(*gain, &mut |s| {
                    for (row, xr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            s[j] += row[j] * xr[j];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    for (r, (row, xr)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..m {
                            let dxh = row[j] * gd[j];
                            mean_d += dxh;
                            mean_dx += dxh * xr[j];
                        }
                        mean_d = mean_d / mf;
                        mean_dx = mean_dx / mf;
                        for j in 0..m {
                            let dxh = row[j] * gd[j];
                            s[r * m + j] += rstd[r] * (dxh - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let m = *nodes[x.0].value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        let gs = grow.iter().copied().sum::<T>();
                        for j in 0..m {
                            srow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = T::from_usize(nodes[x.0].value.len()).unwrap();
                acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumCols(x) => {
                let m = nodes[x.0].value.shape()[1];
                acc(*x, &mut |s| {
                    for (row, &gv) in s.chunks_mut(m).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv);
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let m = nodes[a.0].value.shape()[1];
                acc(*a, &mut |s| {
                    for ((row, brow), &gv) in s.chunks_mut(m).zip(bv.chunks(m)).zip(g) {
                        row.iter_mut().zip(brow).for_each(|(d, &o)| *d += gv * o);
                    }
                });
                acc(*b, &mut |s| {
                    for ((row, arow), &gv) in s.chunks_mut(m).zip(av.chunks(m)).zip(g) {
                        row.iter_mut().zip(arow).for_each(|(d, &o)| *d += gv * o);
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let m = nodes[x.0].value.shape()[1];
                acc(*x, &mut |s| {
                    for (r, ((row, grow), yrow)) in
                        s.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)).enumerate()
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..m {
                            row[j] += (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    acc(p, &mut |s| {
                        for (row, grow) in s.chunks_mut(w).zip(g.chunks(total)) {
                            row.iter_mut()
                                .zip(&grow[off..off + w])
                                .for_each(|(d, &gv)| *d += gv);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |s| {
                        s.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(d, &gv)| *d += gv);
                    });
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                acc(*x, &mut |s| {
                    s[start * inner..start * inner + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d += gv);
                });
            }
            Op::SliceCols { x, start } => {
                let m = nodes[x.0].value.shape()[1];
                let w = node.value.shape()[1];
                acc(*x, &mut |s| {
                    for (row, grow) in s.chunks_mut(m).zip(g.chunks(w)) {
                        row[*start..start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &gv)| *d += gv);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                acc(*x, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        s[i * inner..(i + 1) * inner]
                            .iter_mut()
                            .zip(&g[k * inner..(k + 1) * inner])
                            .for_each(|(d, &gv)| *d += gv);
                    }
                });
            }
            Op::PickCols { x, idx } => {
                let m = nodes[x.0].value.shape()[1];
                acc(*x, &mut |s| {
                    for (r, &c) in idx.iter().enumerate() {
                        s[r * m + c] += g[r];
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [T])), v: Var, d: Option<Vec<T>>) {
    if let Some(d) = d {
        acc(v, &mut |s| s.iter_mut().zip(&d).for_each(|(o, &x)| *o += x));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let data = [0.3, -1.2, 2.5, 4.0];
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &data));
        let sq = g.square(x);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        for (a, b) in grads.get(x).unwrap().iter().zip(&data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn linear_hand_product() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1.0, 2.0]));
        let w = g.input(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.data(y), &[3.0, 2.0]);
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 5.0, 6.5]));
        let eye = g.input(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zb = g.input(t(&[3], &[0.0; 3]));
        let y = g.linear(x, eye, Some(zb)).unwrap();
        assert_eq!(g.data(y), g.data(x));
        let zw = g.input(Tensor::zeros(vec![3, 3]));
        let b = g.input(t(&[3], &[7.0, -1.0, 0.25]));
        let y = g.linear(x, zw, Some(b)).unwrap();
        assert_eq!(g.data(y), &[7.0, -1.0, 0.25, 7.0, -1.0, 0.25]);
    }

    #[test]
    fn linear_dimension_error_names_shapes() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = g.input(t(&[2, 2], &[1.0; 4]));
        let err = g.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_and_tanh_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.data(r), &[0.0, 2.0, 0.0]);
        let th = g.tanh(x);
        assert_eq!(g.data(th)[2], 0.0);
        assert!(g.data(th).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 5 * 4).map(|i| i as f64 * 0.1).collect();
        let x = g.input(t(&[1, 2, 5, 4], &data));
        // 1x1 kernel mapping channel c to channel c.
        let w = g.input(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.input(t(&[2], &[0.0, 0.0]));
        let y = g.conv2d(x, w, Some(b), 1).unwrap();
        assert_eq!(g.data(y), &data[..]);
    }

    #[test]
    fn conv_shape_and_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![3, 84, 84]));
        let w = g.input(Tensor::zeros(vec![32, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[32, 41, 41]);
        let bad = g.input(Tensor::zeros(vec![32, 4, 3, 3]));
        assert!(matches!(g.conv2d(x, bad, None, 2), Err(Error::Dimension { .. })));
        let small = g.input(Tensor::zeros(vec![3, 2, 2]));
        assert!(g.conv2d(small, w, None, 1).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let one = g.input(t(&[2], &[1.0, 1.0]));
        let zero = g.input(t(&[2], &[0.0, 0.0]));
        let c = g.input(t(&[1, 2], &[3.0, 3.0]));
        let y = g.layer_norm(c, one, zero, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0]);
        let x = g.input(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.data(y)[0] - expect).abs() < 1e-15);
        assert!((g.data(y)[1] + expect).abs() < 1e-15);
        assert!((g.data(y)[0] - 1.0).abs() < 1e-5);
        let short = g.input(t(&[1, 1], &[1.0]));
        let g1 = g.input(t(&[1], &[1.0]));
        let s1 = g.input(t(&[1], &[0.0]));
        assert!(g.layer_norm(short, g1, s1, 1e-5).is_err());
    }

    #[test]
    fn log_softmax_cases() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1000.0, 0.0]));
        let y = g.log_softmax(x).unwrap();
        assert!(g.data(y)[0].abs() < 1e-12);
        assert!((g.data(y)[1] + 1000.0).abs() < 1e-9);
        let u = g.input(t(&[1, 4], &[2.5; 4]));
        let y = g.log_softmax(u).unwrap();
        for v in g.data(y) {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
        let x = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = g.log_softmax(x).unwrap();
        let z: f64 = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        for (v, xi) in g.data(y).iter().zip([1.0, 2.0, 3.0]) {
            assert!((v - (xi - z)).abs() < 1e-12);
        }
        let big = g.input(t(&[1, 3], &[-1e4, 0.0, 1e4]));
        let y = g.log_softmax(big).unwrap();
        let s: f64 = g.data(y).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
        g.ensure_finite().unwrap();
    }

    #[test]
    fn nonfinite_forward_is_reported() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.0, 1.0]));
        let _ = g.log(x);
        assert!(matches!(g.ensure_finite(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shared_binding_accumulates_both_uses() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let a = g.sum(x);
        let b = g.scale(a, 3.0);
        let c = g.add(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn detach_stops_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
        assert!(grads.get(d).is_none());
    }
}
