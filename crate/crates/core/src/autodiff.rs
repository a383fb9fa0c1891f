//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive application in topological order. Each
//! primitive checks its output for non-finite values and fails immediately
//! instead of propagating NaN/Inf. Reductions accumulate in a fixed order, so
//! replaying the same computation yields bit-identical gradients.
//!
//! Tensors are row-major. Most primitives work on 2-D `[rows, cols]` data; the
//! batched ones (`batch_matmul`, `softmax_causal`) treat all leading axes as a
//! batch of matrices.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows.len(), cols]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        // Branch-free exponent test per chunk so the scan vectorizes.
        let bad = |v: &f64| ((v.to_bits() >> 52) & 0x7ff == 0x7ff) as u32;
        let mut chunks = self.data.chunks_exact(64);
        for c in &mut chunks {
            if c.iter().map(bad).sum::<u32>() != 0 {
                return false;
            }
        }
        chunks.remainder().iter().map(bad).sum::<u32>() == 0
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Tanh,
    Sigmoid,
}

/// Elementwise binary operations on equal shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Selector for [`Tape::pointwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Unary(Unary),
    Binary(Binary),
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SoftmaxCausal(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    GatherRows(Var, Vec<usize>),
    StackTime(Vec<Var>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: self.shapes[v.0].clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `c += op(a) * op(b)` for row-major `c[m,n]`; operands are given as
/// `(slice, row stride, column stride)` of the logical `[m,k]` / `[k,n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides address exactly the `m*k`, `k*n` and `m*n`
    // elements checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, k, 1, b, n, 1, c, m, k, n);
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, k, 1, b, 1, k, c, m, k, n);
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, 1, k, b, n, 1, c, k, m, n);
}

fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits the last two axes off a batched shape: `(batch, rows, cols)`.
fn batch_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1])),
        n if n > 2 => Ok((
            shape[..n - 2].iter().product(),
            shape[n - 2],
            shape[n - 1],
        )),
        _ => Err(Error::dim(op, format!("need rank >= 2, got {:?}", shape))),
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op))
    }

    /// Records an input (parameter or data). Leaves receive gradients too.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.checked("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// Batched product over leading axes: `[..,m,k] x [..,k,n]`, or with
    /// `trans_b` `[..,m,k] x [..,n,k]^T`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ba, m, k) = batch_dims(&sa, "batch_matmul")?;
        let (bb, r, c) = batch_dims(&sb, "batch_matmul")?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim(
                "batch_matmul",
                format!("{:?} x {:?} (trans_b={})", sa, sb, trans_b),
            ));
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for t in 0..ba {
                let ai = &ad[t * m * k..(t + 1) * m * k];
                let bi = &bd[t * k * n..(t + 1) * k * n];
                let ci = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    gemm_nt(ai, bi, ci, m, k, n);
                } else {
                    gemm_nn(ai, bi, ci, m, k, n);
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.checked(
            "batch_matmul",
            Tensor::new(shape, out)?,
            Op::BatchMatMul { a, b, trans_b },
        )
    }

    /// Row-wise softmax with causal masking on the last two (square) axes:
    /// row `t` is a distribution over columns `0..=t`; later columns are 0.
    pub fn softmax_causal(&mut self, logits: Var) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (nb, t, t2) = batch_dims(&shape, "softmax_causal")?;
        if t != t2 {
            return Err(Error::dim("softmax_causal", format!("not square: {:?}", shape)));
        }
        let x = self.value(logits).data();
        let mut out = vec![0.0; x.len()];
        for b in 0..nb {
            for r in 0..t {
                let base = (b * t + r) * t;
                let row = &x[base..base + r + 1];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (o, &v) in out[base..base + r + 1].iter_mut().zip(row) {
                    *o = (v - mx).exp();
                    s += *o;
                }
                for o in &mut out[base..base + r + 1] {
                    *o /= s;
                }
            }
        }
        self.checked(
            "softmax_causal",
            Tensor::new(shape, out)?,
            Op::SoftmaxCausal(logits),
        )
    }

    /// Normalizes each row over the last axis (1/D variance, eps 1e-5), then
    /// applies `gain` and `bias` of length D.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bb[j];
            }
        }
        let shape = xv.shape.clone();
        self.checked(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => gelu,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
        };
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        let name = match kind {
            Unary::Gelu => "gelu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
        };
        self.checked(name, out, Op::Unary(kind, x))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::dim(
                "pointwise",
                format!("{:?} vs {:?}", av.shape, bv.shape),
            ));
        }
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let out = Tensor {
            shape: av.shape.clone(),
            data,
        };
        self.checked("pointwise", out, Op::Binary(kind, a, b))
    }

    /// Dispatches to [`Tape::unary`] / [`Tape::binary`]; `b` is required for
    /// binary kinds.
    pub fn pointwise(&mut self, kind: Pointwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Pointwise::Unary(u), None) => self.unary(u, a),
            (Pointwise::Binary(op), Some(b)) => self.binary(op, a, b),
            _ => Err(Error::Contract(format!("pointwise {:?}: wrong arity", kind))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Adds a length-`n` bias to every row of `[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + {:?}", xv.shape, bv.shape),
            ));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(&bv.data) {
                *v += b;
            }
        }
        let out = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.checked("add_bias", out, Op::AddBias(x, bias))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| scale * v + shift).collect(),
        };
        self.checked("affine", out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// `[batch*seq, heads*dh] -> [batch*heads, seq, dh]`
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.cols();
        if xv.rows() != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::dim(
                "split_heads",
                format!("{:?} into b={} t={} h={}", xv.shape, batch, seq, heads),
            ));
        }
        let dh = width / heads;
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                let src = xv.row(b * seq + t);
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * heads, seq, dh], out)?;
        Ok(self.push(
            t,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 3 || xv.shape[0] != batch * heads || xv.shape[1] != seq {
            return Err(Error::dim(
                "merge_heads",
                format!("{:?} from b={} t={} h={}", xv.shape, batch, seq, heads),
            ));
        }
        let dh = xv.shape[2];
        let width = heads * dh;
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src = ((b * heads + h) * seq + t) * dh;
                    let dst = (b * seq + t) * width + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data[src..src + dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, width], out)?;
        Ok(self.push(
            t,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Selects rows of a `[m, n]` view; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("row {} of {}", bad, m)));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), n], out)?;
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec())))
    }

    /// Interleaves `steps` matrices of shape `[batch, n]` into
    /// `[batch*steps, n]` with row `b*steps + t` taken from `parts[t]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("stack_time", "no parts"))?;
        let shape = self.shape(*first).to_vec();
        if shape.len() != 2 || parts.iter().any(|p| self.shape(*p) != shape.as_slice()) {
            return Err(Error::dim("stack_time", "parts must share a 2-D shape"));
        }
        let (batch, n, steps) = (shape[0], shape[1], parts.len());
        let mut out = vec![0.0; batch * steps * n];
        for (t, p) in parts.iter().enumerate() {
            let pv = self.value(*p);
            for b in 0..batch {
                let dst = (b * steps + t) * n;
                out[dst..dst + n].copy_from_slice(pv.row(b));
            }
        }
        let t = Tensor::new(vec![batch * steps, n], out)?;
        Ok(self.push(t, Op::StackTime(parts.to_vec())))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum::<f64>();
        self.checked("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                gemm_nt(g, &bv.data, acc(&mut grads[a.0], m * k), m, n, k);
                gemm_tn(&av.data, g, acc(&mut grads[b.0], k * n), m, k, n);
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (nb, m, k) = batch_dims(&av.shape, "").unwrap();
                let n = node.value.cols();
                let (la, lb) = (len(*a), len(*b));
                {
                    let ga = acc(&mut grads[a.0], la);
                    for t in 0..nb {
                        let gi = &g[t * m * n..(t + 1) * m * n];
                        let bi = &bv.data[t * k * n..(t + 1) * k * n];
                        let gai = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            // C = A B^T, B: [n,k]  =>  dA = dC B
                            gemm_nn(gi, bi, gai, m, n, k);
                        } else {
                            // dA = dC B^T, B: [k,n]
                            gemm_nt(gi, bi, gai, m, n, k);
                        }
                    }
                }
                let gb = acc(&mut grads[b.0], lb);
                for t in 0..nb {
                    let gi = &g[t * m * n..(t + 1) * m * n];
                    let ai = &av.data[t * m * k..(t + 1) * m * k];
                    let gbi = &mut gb[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        // dB = dC^T A : [n,k]
                        gemm_tn(gi, ai, gbi, m, n, k);
                    } else {
                        // dB = A^T dC : [k,n]
                        gemm_tn(ai, gi, gbi, m, k, n);
                    }
                }
            }
            Op::SoftmaxCausal(x) => {
                let y = &node.value;
                let (nb, t, _) = batch_dims(&y.shape, "").unwrap();
                let gx = acc(&mut grads[x.0], y.len());
                for b in 0..nb {
                    for r in 0..t {
                        let base = (b * t + r) * t;
                        let yr = &y.data[base..base + r + 1];
                        let gr = &g[base..base + r + 1];
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..=r {
                            gx[base + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gain).data.clone();
                {
                    let gx = acc(&mut grads[x.0], rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xr[j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += k * (d as f64 * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                }
                {
                    let gg = acc(&mut grads[gain.0], d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                let gb = acc(&mut grads[bias.0], d);
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            Op::Unary(kind, x) => {
                let xv = &self.value(*x).data;
                let y = &node.value.data;
                let gx = acc(&mut grads[x.0], xv.len());
                for k in 0..xv.len() {
                    let d = match kind {
                        Unary::Gelu => gelu_grad(xv[k]),
                        Unary::Tanh => 1.0 - y[k] * y[k],
                        Unary::Sigmoid => y[k] * (1.0 - y[k]),
                    };
                    gx[k] += g[k] * d;
                }
            }
            Op::Binary(kind, a, b) => {
                let n = g.len();
                match kind {
                    Binary::Add | Binary::Sub => {
                        let sign = if *kind == Binary::Sub { -1.0 } else { 1.0 };
                        {
                            let ga = acc(&mut grads[a.0], n);
                            for k in 0..n {
                                ga[k] += g[k];
                            }
                        }
                        let gb = acc(&mut grads[b.0], n);
                        for k in 0..n {
                            gb[k] += sign * g[k];
                        }
                    }
                    Binary::Mul => {
                        let av = &self.value(*a).data;
                        let bv = &self.value(*b).data;
                        {
                            let ga = acc(&mut grads[a.0], n);
                            for k in 0..n {
                                ga[k] += g[k] * bv[k];
                            }
                        }
                        let gb = acc(&mut grads[b.0], n);
                        for k in 0..n {
                            gb[k] += g[k] * av[k];
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let n = node.value.cols();
                {
                    let gx = acc(&mut grads[x.0], g.len());
                    for k in 0..g.len() {
                        gx[k] += g[k];
                    }
                }
                let gb = acc(&mut grads[bias.0], n);
                for row in g.chunks(n.max(1)) {
                    for j in 0..n {
                        gb[j] += row[j];
                    }
                }
            }
            Op::Affine(x, s) => {
                let gx = acc(&mut grads[x.0], g.len());
                for k in 0..g.len() {
                    gx[k] += s * g[k];
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = node.value.cols();
                let width = heads * dh;
                let gx = acc(&mut grads[x.0], g.len());
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let src = ((b * heads + h) * seq + t) * dh;
                            let dst = (b * seq + t) * width + h * dh;
                            for j in 0..dh {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let width = node.value.cols();
                let dh = width / heads;
                let gx = acc(&mut grads[x.0], g.len());
                for b in 0..*batch {
                    for h in 0..*heads {
                        for t in 0..*seq {
                            let dst = ((b * heads + h) * seq + t) * dh;
                            let src = (b * seq + t) * width + h * dh;
                            for j in 0..dh {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let n = node.value.cols();
                let gx = acc(&mut grads[x.0], len(*x));
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        gx[i * n + j] += g[r * n + j];
                    }
                }
            }
            Op::StackTime(parts) => {
                let n = node.value.cols();
                let steps = parts.len();
                let batch = node.value.rows() / steps;
                for (t, p) in parts.iter().enumerate() {
                    let gp = acc(&mut grads[p.0], batch * n);
                    for b in 0..batch {
                        let src = (b * steps + t) * n;
                        for j in 0..n {
                            gp[b * n + j] += g[src + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gx = acc(&mut grads[x.0], len(*x));
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        }
    }
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at `point`.
///
/// Returns `max_i |analytic_i - fd_i| / (|analytic_i| + |fd_i| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {}", step)));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p);
        let out = f(&mut t, v)?;
        let val = t.value(out).data()[0];
        if val.is_finite() {
            Ok(val)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data[i] += step;
        let mut minus = point.clone();
        minus.data[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data[i];
        let err = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Weighted sum with fixed pseudo-random weights, so gradients are not all ones.
    fn probe_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let w = random(tape.shape(y), seed);
        let w = tape.leaf(w);
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);

        let eye = t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let c = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(c), t.value(a));

        assert!(matches!(t.matmul(b, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = random(&[4, 2], 2);
        let err = grad_check(
            |t, x| {
                let bv = t.leaf(b.clone());
                let y = t.matmul(x, bv)?;
                t.sum(y)
            },
            &random(&[3, 4], 1),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_causal_rows() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::zeros(&[4, 4]));
        let s = t.softmax_causal(z).unwrap();
        let v = t.value(s);
        for r in 0..4 {
            for c in 0..4 {
                let expect = if c <= r { 1.0 / (r as f64 + 1.0) } else { 0.0 };
                assert!((v.at(r, c) - expect).abs() < 1e-15);
            }
        }
        let x = t.leaf(random(&[5, 5], 9));
        let s = t.softmax_causal(x).unwrap();
        assert_eq!(t.value(s).row(0), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_causal_gradient() {
        let err = grad_check(
            |t, x| {
                let y = t.softmax_causal(x)?;
                probe_sum(t, y, 5)
            },
            &random(&[4, 4], 3),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_examples_and_gradient() {
        let mut t = Tape::new();
        let g = t.leaf(Tensor::full(&[2], 1.0));
        let b = t.leaf(Tensor::zeros(&[2]));
        let x = t.leaf(Tensor::from_rows(&[vec![3.0, 3.0], vec![1.0, -1.0]]).unwrap());
        let y = t.layer_norm(x, g, b).unwrap();
        let v = t.value(y);
        assert_eq!(v.row(0), &[0.0, 0.0]);
        assert!((v.at(1, 0) - 1.0).abs() < 1e-4 && (v.at(1, 1) + 1.0).abs() < 1e-4);

        let gain = random(&[5], 11);
        let bias = random(&[5], 12);
        let err = grad_check(
            |t, x| {
                let g = t.leaf(gain.clone());
                let b = t.leaf(bias.clone());
                let y = t.layer_norm(x, g, b)?;
                probe_sum(t, y, 13)
            },
            &random(&[3, 5], 10),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn pointwise_values_and_gradients() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::scalar(0.0));
        let th = t.unary(Unary::Tanh, z).unwrap();
        let sg = t.pointwise(Pointwise::Unary(Unary::Sigmoid), z, None).unwrap();
        assert_eq!(t.value(th).data()[0], 0.0);
        assert_eq!(t.value(sg).data()[0], 0.5);
        assert!(t.pointwise(Pointwise::Binary(Binary::Add), z, None).is_err());

        for kind in [Unary::Gelu, Unary::Tanh, Unary::Sigmoid] {
            let err = grad_check(
                |t, x| {
                    let y = t.unary(kind, x)?;
                    probe_sum(t, y, 21)
                },
                &random(&[4, 3], 20),
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-5, "{kind:?}: {err}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_basics() {
        let x0 = random(&[3, 2], 4);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let unused = t.leaf(Tensor::zeros(&[2, 2]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
        assert!(!g.reached(unused));

        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let half = t.scale(s, 0.5).unwrap();
        let g = t.backward(half).unwrap();
        assert_eq!(g.wrt(x), x0);

        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_raises() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(f64::MAX));
        assert!(matches!(t.affine(x, 10.0, 0.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn grad_check_trivial_cases() {
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &Tensor::scalar(3.0),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8);
        let err = grad_check(|t, x| {
            let y = t.affine(x, 2.5, 1.0)?;
            t.sum(y)
        }, &random(&[3], 1), 1e-4)
        .unwrap();
        assert!(err < 1e-9);
        assert!(grad_check(|t, x| t.sum(x), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn batched_and_layout_ops_gradients() {
        let other = random(&[2, 3, 4], 30);
        for trans in [false, true] {
            let shape = if trans { [2, 5, 4] } else { [2, 5, 3] };
            let err = grad_check(
                |t, x| {
                    let o = t.leaf(other.clone());
                    let y = if trans {
                        t.batch_matmul(o, x, true)?
                    } else {
                        t.batch_matmul(x, o, false)?
                    };
                    probe_sum(t, y, 31)
                },
                &random(&shape, 32),
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-6, "trans={trans}: {err}");
        }
        let err = grad_check(
            |t, x| {
                let s = t.split_heads(x, 2, 3, 2)?;
                let y = t.unary(Unary::Tanh, s)?;
                let m = t.merge_heads(y, 2, 3, 2)?;
                let g = t.gather_rows(m, &[0, 5, 5, 2])?;
                probe_sum(t, g, 33)
            },
            &random(&[6, 4], 34),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn split_merge_roundtrip() {
        let x0 = random(&[6, 4], 40);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let s = t.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(t.shape(s), &[4, 3, 2]);
        let m = t.merge_heads(s, 2, 3, 2).unwrap();
        assert_eq!(t.value(m), &x0);
    }

    #[test]
    fn stack_time_layout_and_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let b = t.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let s = t.stack_time(&[a, b]).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 3.0, 2.0, 4.0]);
        let w = t.leaf(Tensor::new(vec![4, 1], vec![1.0, 10.0, 100.0, 1000.0]).unwrap());
        let p = t.mul(s, w).unwrap();
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 100.0]);
        assert_eq!(g.wrt(b).data(), &[10.0, 1000.0]);
    }
}
