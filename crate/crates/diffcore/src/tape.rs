//! The computation tape and its fixed op set.
//!
//! Every op validates shapes up front (there is no broadcasting), computes
//! its value eagerly, checks it for non-finite entries and appends a node.
//! Nodes are appended in execution order, so walking the node list
//! backwards is a reverse topological order.

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive mask value standing in for negative infinity.
pub const MASK_NEG: f64 = -1e30;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row partition of a `[rows, cols]` activation into independent sequences.
///
/// Sequence-aware ops (causal convolution, the decay scan, per-sequence
/// reductions) never mix rows across segment boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    lens: Vec<usize>,
}

impl Segments {
    pub fn new(lens: Vec<usize>) -> Result<Self> {
        if lens.is_empty() || lens.iter().any(|&l| l == 0) {
            return Err(DiffError::InvalidArgument {
                op: "segments",
                reason: format!("segment lengths must be nonempty and positive, got {lens:?}"),
            });
        }
        Ok(Segments { lens })
    }

    pub fn uniform(count: usize, len: usize) -> Result<Self> {
        Segments::new(vec![len; count])
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn count(&self) -> usize {
        self.lens.len()
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    /// `(start_row, len)` of each segment.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lens.iter().scan(0usize, |start, &len| {
            let s = *start;
            *start += len;
            Some((s, len))
        })
    }
}

pub type UnaryFn = fn(f64) -> f64;
/// Derivative of a unary map, given the input `x` and output `y`.
pub type UnaryGradFn = fn(f64, f64) -> f64;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Silu,
    Exp,
    Softplus,
    Relu,
    Custom { name: &'static str, df: UnaryGradFn },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalConv {
        x: Var,
        kernel: Var,
        segs: Segments,
    },
    DecayScan {
        u: Var,
        decay: Var,
        segs: Segments,
    },
    MeanRows {
        x: Var,
        segs: Segments,
    },
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanCols(Var),
    MaxCols {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Unary(_, u) => match u {
                Unary::Sigmoid => "sigmoid",
                Unary::Silu => "silu",
                Unary::Exp => "exp",
                Unary::Softplus => "softplus",
                Unary::Relu => "relu",
                Unary::Custom { name, .. } => name,
            },
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalConv { .. } => "causal_conv",
            Op::DecayScan { .. } => "decay_scan",
            Op::MeanRows { .. } => "mean_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::MeanCols(..) => "mean_cols",
            Op::MaxCols { .. } => "max_cols",
            Op::SumAll(..) => "sum_all",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_leaf.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// Records one forward pass. Single-threaded; build one per training
/// context.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes and makes the tape usable again after `backward`.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Parameters pass `requires_grad = true`, data and
    /// constants pass `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.check_live()?;
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(DiffError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(DiffError::UnknownVar(v.0))
    }

    fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.node(v)?.value;
        t.dims2().ok_or_else(|| DiffError::shapes(op, &[t.shape()]))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: op.name(),
                node: idx,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(idx))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let rg = self.any_grad(inputs);
        self.push_raw(value, op, rg)
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(DiffError::shapes("matmul", &[self.shape(a)?, self.shape(b)?]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `[m,k] · [n,k]ᵀ → [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(DiffError::shapes("matmul_nt", &[self.shape(a)?, self.shape(b)?]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), &[a, b])
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(DiffError::shapes(op, &[sa, sb]));
        }
        Ok(sa.to_vec())
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_live()?;
        let shape = self.same_shape(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::new(shape, data)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Adds a `[n]` vector to every row of a `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.matrix("add_bias", x)?;
        if self.shape(bias)? != [n] {
            return Err(DiffError::shapes("add_bias", &[self.shape(x)?, self.shape(bias)?]));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::AddBias(x, bias), &[x, bias])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let data = v.data().iter().map(|&t| f(t)).collect();
        self.push(Tensor::new(shape, data)?, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |t| t * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |t| t + c)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), |t| t * t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Unary(x, Unary::Sigmoid), sigmoid)
    }

    /// `x · sigmoid(x)`, the smooth nonlinearity used inside MLPs.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Unary(x, Unary::Silu), |t| t * sigmoid(t))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Unary(x, Unary::Exp), f64::exp)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Unary(x, Unary::Softplus), softplus)
    }

    /// Hinge clamp `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Unary(x, Unary::Relu), |t| t.max(0.0))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn unary(&mut self, x: Var, name: &'static str, f: UnaryFn, df: UnaryGradFn) -> Result<Var> {
        self.map(x, Op::Unary(x, Unary::Custom { name, df }), f)
    }

    // ── normalisation ──────────────────────────────────────────────────

    /// Row-wise softmax of `x + mask`. The mask is a constant of the same
    /// shape; use [`MASK_NEG`] for excluded entries.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.matrix("softmax", x)?;
        if let Some(mk) = mask {
            if mk.shape() != [m, n] {
                return Err(DiffError::shapes("softmax", &[self.shape(x)?, mk.shape()]));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            for (c, o) in row.iter_mut().enumerate() {
                *o = xv[r * n + c] + mask.map_or(0.0, |mk| mk.data()[r * n + c]);
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for o in row.iter_mut() {
                *o = (*o - mx).exp();
                sum += *o;
            }
            for o in row.iter_mut() {
                *o /= sum;
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.matrix("layer_norm", x)?;
        if self.shape(gamma)? != [n] || self.shape(beta)? != [n] {
            return Err(DiffError::shapes(
                "layer_norm",
                &[self.shape(x)?, self.shape(gamma)?, self.shape(beta)?],
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push(Tensor::matrix(m, n, out)?, op, &[x, gamma, beta])
    }

    // ── sequence ops ───────────────────────────────────────────────────

    fn check_segments(&self, op: &'static str, x: Var, segs: &Segments) -> Result<(usize, usize)> {
        let (rows, cols) = self.matrix(op, x)?;
        if segs.total() != rows {
            return Err(DiffError::InvalidArgument {
                op,
                reason: format!("segments cover {} rows, tensor has {rows}", segs.total()),
            });
        }
        Ok((rows, cols))
    }

    /// Depthwise causal 1-D convolution along rows within each segment.
    ///
    /// `kernel` is `[channels, width]`; tap `j` multiplies the input `j`
    /// positions back, so tap 0 is the current position. Padding is on the
    /// left only, so output row `t` never reads rows after `t`.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, segs: &Segments) -> Result<Var> {
        self.check_live()?;
        let (rows, d) = self.check_segments("causal_conv", x, segs)?;
        let (kd, width) = self.matrix("causal_conv", kernel)?;
        if kd != d || width == 0 {
            return Err(DiffError::shapes("causal_conv", &[self.shape(x)?, self.shape(kernel)?]));
        }
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; rows * d];
        for (start, len) in segs.spans() {
            for t in 0..len {
                let orow = &mut out[(start + t) * d..(start + t + 1) * d];
                for j in 0..width.min(t + 1) {
                    let irow = &xv[(start + t - j) * d..(start + t - j + 1) * d];
                    for c in 0..d {
                        orow[c] += kv[c * width + j] * irow[c];
                    }
                }
            }
        }
        let op = Op::CausalConv {
            x,
            kernel,
            segs: segs.clone(),
        };
        self.push(Tensor::matrix(rows, d, out)?, op, &[x, kernel])
    }

    /// Linear recurrence `s_t = decay ⊙ s_{t-1} + u_t` per segment, with a
    /// zero state before the first row. `decay` is a `[channels]` vector.
    pub fn decay_scan(&mut self, u: Var, decay: Var, segs: &Segments) -> Result<Var> {
        self.check_live()?;
        let (rows, d) = self.check_segments("decay_scan", u, segs)?;
        if self.shape(decay)? != [d] {
            return Err(DiffError::shapes("decay_scan", &[self.shape(u)?, self.shape(decay)?]));
        }
        let uv = self.value(u).data();
        let a = self.value(decay).data();
        let mut out = vec![0.0; rows * d];
        for (start, len) in segs.spans() {
            out[start * d..(start + 1) * d].copy_from_slice(&uv[start * d..(start + 1) * d]);
            for t in start + 1..start + len {
                for c in 0..d {
                    out[t * d + c] = a[c] * out[(t - 1) * d + c] + uv[t * d + c];
                }
            }
        }
        let op = Op::DecayScan {
            u,
            decay,
            segs: segs.clone(),
        };
        self.push(Tensor::matrix(rows, d, out)?, op, &[u, decay])
    }

    // ── reductions ─────────────────────────────────────────────────────

    /// Mean over the rows of each segment: `[rows, cols] → [segments, cols]`.
    pub fn mean_rows(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        self.check_live()?;
        let (_, cols) = self.check_segments("mean_rows", x, segs)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; segs.count() * cols];
        for (s, (start, len)) in segs.spans().enumerate() {
            let orow = &mut out[s * cols..(s + 1) * cols];
            for r in start..start + len {
                for c in 0..cols {
                    orow[c] += xv[r * cols + c];
                }
            }
            for o in orow.iter_mut() {
                *o /= len as f64;
            }
        }
        let op = Op::MeanRows { x, segs: segs.clone() };
        self.push(Tensor::matrix(segs.count(), cols, out)?, op, &[x])
    }

    /// Max over the rows of each segment: `[rows, cols] → [segments, cols]`.
    /// The gradient flows to the first maximal row.
    pub fn max_rows(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        self.check_live()?;
        let (_, cols) = self.check_segments("max_rows", x, segs)?;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; segs.count() * cols];
        let mut argmax = vec![0usize; segs.count() * cols];
        for (s, (start, len)) in segs.spans().enumerate() {
            for r in start..start + len {
                for c in 0..cols {
                    let v = xv[r * cols + c];
                    if v > out[s * cols + c] {
                        out[s * cols + c] = v;
                        argmax[s * cols + c] = r * cols + c;
                    }
                }
            }
        }
        self.push(
            Tensor::matrix(segs.count(), cols, out)?,
            Op::MaxRows { x, argmax },
            &[x],
        )
    }

    /// Mean over the last axis: `[rows, cols] → [rows, 1]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (rows, cols) = self.matrix("mean_cols", x)?;
        let out = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .map(|r| r.iter().sum::<f64>() / cols as f64)
            .collect();
        self.push(Tensor::matrix(rows, 1, out)?, Op::MeanCols(x), &[x])
    }

    /// Max over the last axis: `[rows, cols] → [rows, 1]`.
    pub fn max_cols(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (rows, cols) = self.matrix("max_cols", x)?;
        if cols == 0 {
            return Err(DiffError::shapes("max_cols", &[self.shape(x)?]));
        }
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for (r, row) in self.value(x).data().chunks_exact(cols).enumerate() {
            let mut best = 0;
            for c in 1..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            out.push(row[best]);
            argmax.push(r * cols + best);
        }
        self.push(Tensor::matrix(rows, 1, out)?, Op::MaxCols { x, argmax }, &[x])
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    // ── structural ─────────────────────────────────────────────────────

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: "concat_cols",
                reason: "no inputs".into(),
            });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.matrix("concat_cols", p))
            .collect::<Result<_>>()?;
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).shape()).collect();
            return Err(DiffError::shapes("concat_cols", &shapes));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks matrices with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: "concat_rows",
                reason: "no inputs".into(),
            });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.matrix("concat_rows", p))
            .collect::<Result<_>>()?;
        let cols = dims[0].1;
        if dims.iter().any(|d| d.1 != cols) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).shape()).collect();
            return Err(DiffError::shapes("concat_rows", &shapes));
        }
        let rows: usize = dims.iter().map(|d| d.0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_live()?;
        let (rows, cols) = self.matrix("slice_rows", x)?;
        if start + len > rows || len == 0 {
            return Err(DiffError::InvalidArgument {
                op: "slice_rows",
                reason: format!("rows {start}..{} out of range for {rows} rows", start + len),
            });
        }
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::matrix(len, cols, out)?, Op::SliceRows { x, start }, &[x])
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a one-element `loss`. Returns the gradient of
    /// every leaf recorded with `requires_grad`, then clears the tape; a
    /// second call without a new forward pass is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_live()?;
        let loss_shape = self.shape(loss)?.to_vec();
        if !self.value(loss).is_scalar() {
            return Err(DiffError::NotScalar { shape: loss_shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                if !t.is_finite() {
                    return Err(DiffError::NonFinite {
                        op: "backward",
                        node: i,
                    });
                }
                out.by_leaf.insert(Var(i), t);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }

        self.nodes.clear();
        self.consumed = true;
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;

        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).dims2().unwrap().1;
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), true, ga, true);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a).data(), true, g, false, gb, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).dims2().unwrap().0;
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), false, ga, true);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, n * k);
                    gemm(n, m, k, g, true, val(*a).data(), false, gb, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o += sign * v);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gv), &w) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * w;
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((o, &gv), &w) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * w;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let n = val(*bias).numel();
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(o, &v)| *o += c * v);
            }
            Op::AddScalar(x) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            }
            Op::Square(x) => {
                let xv = val(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((o, &gv), &t) in gx.iter_mut().zip(g).zip(xv) {
                    *o += 2.0 * t * gv;
                }
            }
            Op::Unary(x, kind) => {
                let xv = val(*x).data();
                let gx = slot(grads, *x, g.len());
                let d: Box<dyn Fn(f64, f64) -> f64> = match kind {
                    Unary::Sigmoid => Box::new(|_, yv| yv * (1.0 - yv)),
                    Unary::Silu => Box::new(|t, _| {
                        let s = sigmoid(t);
                        s + t * s * (1.0 - s)
                    }),
                    Unary::Exp => Box::new(|_, yv| yv),
                    Unary::Softplus => Box::new(|t, _| sigmoid(t)),
                    Unary::Relu => Box::new(|t, _| if t > 0.0 { 1.0 } else { 0.0 }),
                    Unary::Custom { df, .. } => Box::new(*df),
                };
                for (j, o) in gx.iter_mut().enumerate() {
                    *o += g[j] * d(xv[j], y[j]);
                }
            }
            Op::Softmax(x) => {
                let n = node.value.dims2().unwrap().1;
                let gx = slot(grads, *x, g.len());
                for ((grow, yrow), orow) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        orow[c] += yrow[c] * (grow[c] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = val(*gamma).numel();
                if wants(*beta) {
                    let gb = slot(grads, *beta, n);
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, n);
                    for (row, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            gg[c] += row[c] * hrow[c];
                        }
                    }
                }
                if wants(*x) {
                    let gam = val(*gamma).data();
                    let gx = slot(grads, *x, g.len());
                    let mut dh = vec![0.0; n];
                    for (r, ((row, hrow), orow)) in g
                        .chunks_exact(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        for c in 0..n {
                            dh[c] = row[c] * gam[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            orow[c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CausalConv { x, kernel, segs } => {
                let (_, d) = val(*x).dims2().unwrap();
                let width = val(*kernel).dims2().unwrap().1;
                let xv = val(*x).data();
                let kv = val(*kernel).data();
                if wants(*x) {
                    let gx = slot(grads, *x, xv.len());
                    for (start, len) in segs.spans() {
                        for t in 0..len {
                            let grow = &g[(start + t) * d..(start + t + 1) * d];
                            for j in 0..width.min(t + 1) {
                                let base = (start + t - j) * d;
                                for c in 0..d {
                                    gx[base + c] += kv[c * width + j] * grow[c];
                                }
                            }
                        }
                    }
                }
                if wants(*kernel) {
                    let gk = slot(grads, *kernel, kv.len());
                    for (start, len) in segs.spans() {
                        for t in 0..len {
                            let grow = &g[(start + t) * d..(start + t + 1) * d];
                            for j in 0..width.min(t + 1) {
                                let base = (start + t - j) * d;
                                for c in 0..d {
                                    gk[c * width + j] += xv[base + c] * grow[c];
                                }
                            }
                        }
                    }
                }
            }
            Op::DecayScan { u, decay, segs } => {
                let d = val(*decay).numel();
                let a = val(*decay).data();
                // carry holds dL/ds_t including contributions from later steps
                let mut carry = vec![0.0; g.len()];
                for (start, len) in segs.spans() {
                    for t in (start..start + len).rev() {
                        for c in 0..d {
                            let next = if t + 1 < start + len {
                                a[c] * carry[(t + 1) * d + c]
                            } else {
                                0.0
                            };
                            carry[t * d + c] = g[t * d + c] + next;
                        }
                    }
                }
                if wants(*decay) {
                    let ga = slot(grads, *decay, d);
                    for (start, len) in segs.spans() {
                        for t in start + 1..start + len {
                            for c in 0..d {
                                ga[c] += carry[t * d + c] * y[(t - 1) * d + c];
                            }
                        }
                    }
                }
                if wants(*u) {
                    let gu = slot(grads, *u, g.len());
                    gu.iter_mut().zip(&carry).for_each(|(o, &v)| *o += v);
                }
            }
            Op::MeanRows { x, segs } => {
                let cols = val(*x).dims2().unwrap().1;
                let gx = slot(grads, *x, val(*x).numel());
                for (s, (start, len)) in segs.spans().enumerate() {
                    let grow = &g[s * cols..(s + 1) * cols];
                    for r in start..start + len {
                        for c in 0..cols {
                            gx[r * cols + c] += grow[c] / len as f64;
                        }
                    }
                }
            }
            Op::MaxRows { x, argmax } | Op::MaxCols { x, argmax } => {
                let gx = slot(grads, *x, val(*x).numel());
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
            }
            Op::MeanCols(x) => {
                let cols = val(*x).dims2().unwrap().1;
                let gx = slot(grads, *x, val(*x).numel());
                for (row, &gv) in gx.chunks_exact_mut(cols).zip(g) {
                    row.iter_mut().for_each(|o| *o += gv / cols as f64);
                }
            }
            Op::SumAll(x) => {
                let gx = slot(grads, *x, val(*x).numel());
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).dims2().unwrap().1;
                    if wants(p) {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        let gp = slot(grads, p, n);
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(o, &v)| *o += v);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = val(*x).dims2().unwrap().1;
                let gx = slot(grads, *x, val(*x).numel());
                let base = start * cols;
                gx[base..base + g.len()].iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            }
        }
        Ok(())
    }
}
