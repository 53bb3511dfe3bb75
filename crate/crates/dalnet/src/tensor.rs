//! Minimal n-dimensional real tensor with reverse-mode automatic
//! differentiation.
//!
//! `Tensor` is the persistent container (parameters, buffers). All
//! differentiable computation happens on a [`Tape`]: leaves are registered,
//! ops append nodes in execution order, and [`Tape::backward`] replays the
//! node list in reverse. Gradients accumulate across repeated backward calls
//! until explicitly reset, which matches minibatch usage.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?} ({detail})")]
    InvalidShape { op: &'static str, shape: Vec<usize>, detail: String },
    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a tensor, used to route tape gradients back to
/// parameters. Clones keep the id of the original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

/// Dense row-major real array. Immutable after construction except for the
/// gradient buffer and optimizer updates.
#[derive(Debug, Clone)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::LengthMismatch { len: data.len(), shape });
        }
        Ok(Tensor {
            id: TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)),
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Trainable tensor (gradients collected during backward).
    pub fn param(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let mut t = Tensor::new(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape).expect("zeros: valid shape")
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(vec![x], vec![1]).expect("scalar")
    }

    pub fn id(&self) -> TensorId {
        self.id
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `g` into the gradient buffer (allocated on first use).
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn reset_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n], accumulated into `out`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    AddBias { x: Var, b: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Silu { x: Var },
    Exp { x: Var },
    SoftmaxRows { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Transpose { x: Var },
    Reshape { x: Var },
    ConcatRows { xs: Vec<Var> },
    ConcatCols { xs: Vec<Var> },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScaleRows { x: Var, s: Var },
    Conv1dSame { x: Var, kernel: Var, bias: Var, seg_len: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    src: Option<TensorId>,
    op: Op,
}

/// Records differentiable operations in execution order.
///
/// Node order is topological by construction (inputs are created before the
/// ops consuming them), so one reverse sweep visits each op exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: std::collections::HashMap<TensorId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { data, shape, requires_grad, grad: None, src: None, op });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf. Data is snapshotted; later mutation of the
    /// source does not affect the tape. A tensor id is registered at most
    /// once per tape: repeated calls return the first node, so layers that
    /// reuse a weight across timesteps accumulate its full gradient there.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.leaves.get(&t.id) {
            debug_assert_eq!(self.nodes[v.0].shape, t.shape, "leaf re-registered with new shape");
            return v;
        }
        let v = self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf);
        self.nodes[v.0].src = Some(t.id);
        self.leaves.insert(t.id, v);
        v
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch { len: data.len(), shape });
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![x], vec![1], false, Op::Leaf)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of the leaf registered from the tensor with this id.
    pub fn grad_for(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes
            .iter()
            .find(|n| n.src == Some(id))
            .and_then(|n| n.grad.as_deref())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                detail: "expected 1-D or 2-D".into(),
            }),
        }
    }

    // ── Operations ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ([m, k], [k2, n]) = (&sa[..], &sb[..]) else {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb });
        }
        let (m, k, n) = (*m, *k, *n);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.nodes[b.0].data.len() == 1 {
            Ok(sa.to_vec())
        } else if self.nodes[a.0].data.len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(TensorError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let shape = self.binary_shapes(op_name, a, b)?;
        let numel: usize = shape.iter().product();
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let out: Vec<f64> = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            da.iter().map(|&x| f(x, db[0])).collect()
        } else {
            db.iter().map(|&y| f(da[0], y)).collect()
        };
        debug_assert_eq!(out.len(), numel);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, shape, rg, make(a, b)))
    }

    /// Elementwise addition (equal shapes or one-element broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| k * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, shape, rg, Op::Scale { x, k })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Add a bias row-vector `b` of shape `[c]` to every row of `x: [r, c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "add_bias")?;
        if self.shape(b) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bd = self.nodes[b.0].data.clone();
        let mut out = self.data(x).to_vec();
        for row in 0..r {
            for col in 0..c {
                out[row * c + col] += bd[col];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, shape, rg, Op::AddBias { x, b }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, make: impl Fn(Var) -> Op) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, shape, rg, make(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |x| Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |x| Op::Sigmoid { x })
    }

    /// SiLU activation, x·sigmoid(x).
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), |x| Op::Silu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |x| Op::Exp { x })
    }

    /// Softmax along `axis` of a 1-D or 2-D input, stabilized by
    /// max-subtraction. For 1-D input the only valid axis is 0.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        match (shape.len(), axis) {
            (1, 0) | (2, 1) => {
                let (r, c) = self.rows_cols(x, "softmax")?;
                let out = softmax_rows_raw(self.data(x), r, c);
                let rg = self.nodes[x.0].requires_grad;
                Ok(self.push(out, shape, rg, Op::SoftmaxRows { x }))
            }
            (2, 0) => {
                let xt = self.transpose(x)?;
                let sm = self.softmax(xt, 1)?;
                self.transpose(sm)
            }
            _ => Err(TensorError::InvalidAxis { axis, shape }),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.data(x).iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![s / n], vec![1], rg, Op::Mean { x })
    }

    /// Sum of a 2-D input along `axis` (0 collapses rows, 1 collapses cols).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [r, c] = shape[..] else {
            return Err(TensorError::InvalidShape {
                op: "sum_axis",
                shape,
                detail: "expected 2-D".into(),
            });
        };
        if axis > 1 {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let d = self.data(x);
        let out = if axis == 0 {
            let mut o = vec![0.0; c];
            for row in 0..r {
                for col in 0..c {
                    o[col] += d[row * c + col];
                }
            }
            o
        } else {
            (0..r).map(|row| d[row * c..(row + 1) * c].iter().sum()).collect()
        };
        let out_shape = vec![if axis == 0 { c } else { r }];
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, out_shape, rg, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [r, c] = shape[..] else {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                shape,
                detail: "expected 2-D".into(),
            });
        };
        if axis > 1 {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let count = if axis == 0 { r } else { c } as f64;
        let d = self.data(x);
        let out: Vec<f64> = if axis == 0 {
            let mut o = vec![0.0; c];
            for row in 0..r {
                for col in 0..c {
                    o[col] += d[row * c + col];
                }
            }
            o.iter().map(|v| v / count).collect()
        } else {
            (0..r)
                .map(|row| d[row * c..(row + 1) * c].iter().sum::<f64>() / count)
                .collect()
        };
        let out_shape = vec![if axis == 0 { c } else { r }];
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, out_shape, rg, Op::MeanAxis { x, axis }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [r, c] = shape[..] else {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape,
                detail: "expected 2-D".into(),
            });
        };
        let out = transpose_raw(self.data(x), r, c);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, vec![c, r], rg, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(TensorError::LengthMismatch { len: self.nodes[x.0].data.len(), shape });
        }
        let data = self.data(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::Reshape { x }))
    }

    /// Stack 2-D blocks with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::InvalidShape {
            op: "concat_rows",
            shape: vec![],
            detail: "empty input".into(),
        })?;
        let (_, c) = self.rows_cols(*first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &v in xs {
            let (r, cv) = self.rows_cols(v, "concat_rows")?;
            if cv != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
            rows += r;
            rg |= self.nodes[v.0].requires_grad;
            data.extend_from_slice(&self.nodes[v.0].data);
        }
        Ok(self.push(data, vec![rows, c], rg, Op::ConcatRows { xs: xs.to_vec() }))
    }

    /// Stack 2-D blocks with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::InvalidShape {
            op: "concat_cols",
            shape: vec![],
            detail: "empty input".into(),
        })?;
        let (r, _) = self.rows_cols(*first, "concat_cols")?;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| self.rows_cols(v, "concat_cols").map(|(rv, cv)| {
                debug_assert_eq!(rv, r);
                cv
            }))
            .collect::<Result<_>>()?;
        for &v in xs {
            let (rv, _) = self.rows_cols(v, "concat_cols")?;
            if rv != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut rg = false;
        let mut offset = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            rg |= self.nodes[v.0].requires_grad;
            for row in 0..r {
                let src = &self.nodes[v.0].data[row * w..(row + 1) * w];
                data[row * total + offset..row * total + offset + w].copy_from_slice(src);
            }
            offset += w;
        }
        Ok(self.push(data, vec![r, total], rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Contiguous row slice `[start, start+len)` of a 2-D input.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "slice_rows")?;
        if start + len > r {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                shape: self.shape(x).to_vec(),
                detail: format!("slice {start}..{} out of {r} rows", start + len),
            });
        }
        let data = self.nodes[x.0].data[start * c..(start + len) * c].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, vec![len, c], rg, Op::SliceRows { x, start }))
    }

    /// Gather rows of a 2-D input by index (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: self.shape(x).to_vec(),
                detail: format!("row index {bad} out of {r}"),
            });
        }
        let d = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let rg = self.nodes[x.0].requires_grad;
        let rows = idx.len();
        Ok(self.push(data, vec![rows, c], rg, Op::GatherRows { x, idx }))
    }

    /// Scale row `i` of `x: [r, c]` by `s[i]` where `s` has shape `[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "scale_rows")?;
        if self.nodes[s.0].data.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sd = self.nodes[s.0].data.clone();
        let mut out = self.data(x).to_vec();
        for row in 0..r {
            for col in 0..c {
                out[row * c + col] *= sd[row];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad || self.nodes[s.0].requires_grad;
        Ok(self.push(out, shape, rg, Op::ScaleRows { x, s }))
    }

    /// Same-padded 1-D convolution over one or more concatenated segments.
    ///
    /// `x: [segments·seg_len, in_c]`, `kernel: [out_c, in_c, kw]`,
    /// `bias: [out_c]`. Zero padding never crosses a segment boundary, so a
    /// batch of independent sequences can share one call.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var, seg_len: usize) -> Result<Var> {
        let (rows, in_c) = self.rows_cols(x, "conv1d_same")?;
        let kshape = self.shape(kernel).to_vec();
        let [out_c, k_in, kw] = kshape[..] else {
            return Err(TensorError::InvalidShape {
                op: "conv1d_same",
                shape: kshape,
                detail: "kernel must be [out_c, in_c, kw]".into(),
            });
        };
        if k_in != in_c || self.shape(bias) != [out_c] || seg_len == 0 || rows % seg_len != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_same",
                lhs: self.shape(x).to_vec(),
                rhs: kshape,
            });
        }
        let segments = rows / seg_len;
        let pad = (kw - 1) / 2;
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[kernel.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut out = vec![0.0; rows * out_c];
        for row in out.chunks_mut(out_c) {
            row.copy_from_slice(bd);
        }
        // Per tap: a [in_c, out_c] weight slab applied to shifted rows.
        for tap in 0..kw {
            let mut slab = vec![0.0; in_c * out_c];
            for oc in 0..out_c {
                for ic in 0..in_c {
                    slab[ic * out_c + oc] = kd[(oc * in_c + ic) * kw + tap];
                }
            }
            for seg in 0..segments {
                for n in 0..seg_len {
                    let src = n as isize + tap as isize - pad as isize;
                    if src < 0 || src >= seg_len as isize {
                        continue;
                    }
                    let xrow = &xd[(seg * seg_len + src as usize) * in_c..][..in_c];
                    let orow = &mut out[(seg * seg_len + n) * out_c..][..out_c];
                    for (ic, &xv) in xrow.iter().enumerate() {
                        let srow = &slab[ic * out_c..(ic + 1) * out_c];
                        for (o, &sv) in orow.iter_mut().zip(srow) {
                            *o += xv * sv;
                        }
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[kernel.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        Ok(self.push(out, vec![rows, out_c], rg, Op::Conv1dSame { x, kernel, bias, seg_len }))
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every node on a
    /// `requires_grad` path are added into the persistent per-node buffers,
    /// so calling backward twice doubles them; use [`Tape::zero_grads`] to
    /// reset between sweeps when accumulation is not wanted.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dout) = adj[i].take() else { continue };
            self.propagate(i, &dout, &mut adj);
            match &mut self.nodes[i].grad {
                Some(g) => {
                    for (a, d) in g.iter_mut().zip(&dout) {
                        *a += d;
                    }
                }
                None => self.nodes[i].grad = Some(dout),
            }
        }
        Ok(())
    }

    fn acc(adj: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, add: impl Fn(&mut [f64])) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
        add(slot);
    }

    fn propagate(&self, i: usize, dout: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let [m, n] = nodes[i].shape[..] else { unreachable!() };
                let k = nodes[a.0].shape[1];
                if nodes[a.0].requires_grad {
                    // dA = dOut · Bᵀ
                    let bt = transpose_raw(&nodes[b.0].data, k, n);
                    Self::acc(adj, nodes, *a, |g| matmul_acc(dout, &bt, g, m, n, k));
                }
                if nodes[b.0].requires_grad {
                    // dB = Aᵀ · dOut
                    let at = transpose_raw(&nodes[a.0].data, m, k);
                    Self::acc(adj, nodes, *b, |g| matmul_acc(&at, dout, g, k, m, n));
                }
            }
            Op::Add { a, b } => {
                for &v in [a, b] {
                    Self::acc(adj, nodes, v, |g| {
                        if g.len() == dout.len() {
                            for (gi, d) in g.iter_mut().zip(dout) {
                                *gi += d;
                            }
                        } else {
                            g[0] += dout.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                Self::acc(adj, nodes, *a, |g| {
                    if g.len() == dout.len() {
                        for (gi, d) in g.iter_mut().zip(dout) {
                            *gi += d;
                        }
                    } else {
                        g[0] += dout.iter().sum::<f64>();
                    }
                });
                Self::acc(adj, nodes, *b, |g| {
                    if g.len() == dout.len() {
                        for (gi, d) in g.iter_mut().zip(dout) {
                            *gi -= d;
                        }
                    } else {
                        g[0] -= dout.iter().sum::<f64>();
                    }
                });
            }
            Op::Mul { a, b } => {
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                Self::acc(adj, nodes, *a, |g| {
                    if g.len() == dout.len() {
                        for ((gi, d), idx) in g.iter_mut().zip(dout).zip(0..) {
                            *gi += d * db[idx % db.len()];
                        }
                    } else {
                        g[0] += dout.iter().zip(db.iter()).map(|(d, bv)| d * bv).sum::<f64>();
                    }
                });
                Self::acc(adj, nodes, *b, |g| {
                    if g.len() == dout.len() {
                        for ((gi, d), idx) in g.iter_mut().zip(dout).zip(0..) {
                            *gi += d * da[idx % da.len()];
                        }
                    } else {
                        g[0] += dout.iter().zip(da.iter()).map(|(d, av)| d * av).sum::<f64>();
                    }
                });
            }
            Op::Scale { x, k } => {
                let k = *k;
                Self::acc(adj, nodes, *x, |g| {
                    for (gi, d) in g.iter_mut().zip(dout) {
                        *gi += k * d;
                    }
                });
            }
            Op::AddBias { x, b } => {
                Self::acc(adj, nodes, *x, |g| {
                    for (gi, d) in g.iter_mut().zip(dout) {
                        *gi += d;
                    }
                });
                let c = nodes[b.0].data.len();
                Self::acc(adj, nodes, *b, |g| {
                    for (idx, d) in dout.iter().enumerate() {
                        g[idx % c] += d;
                    }
                });
            }
            Op::Tanh { x } => {
                let y = &nodes[i].data;
                Self::acc(adj, nodes, *x, |g| {
                    for ((gi, d), yv) in g.iter_mut().zip(dout).zip(y) {
                        *gi += d * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &nodes[i].data;
                Self::acc(adj, nodes, *x, |g| {
                    for ((gi, d), yv) in g.iter_mut().zip(dout).zip(y) {
                        *gi += d * yv * (1.0 - yv);
                    }
                });
            }
            Op::Silu { x } => {
                let xd = &nodes[x.0].data;
                Self::acc(adj, nodes, *x, |g| {
                    for ((gi, d), &xv) in g.iter_mut().zip(dout).zip(xd) {
                        let s = sigmoid(xv);
                        *gi += d * (s + xv * s * (1.0 - s));
                    }
                });
            }
            Op::Exp { x } => {
                let y = &nodes[i].data;
                Self::acc(adj, nodes, *x, |g| {
                    for ((gi, d), yv) in g.iter_mut().zip(dout).zip(y) {
                        *gi += d * yv;
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let y = &nodes[i].data;
                let cols = *nodes[i].shape.last().unwrap();
                let rows = y.len() / cols;
                Self::acc(adj, nodes, *x, |g| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dr = &dout[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            g[r * cols + c] += yr[c] * (dr[c] - dot);
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let d = dout[0];
                Self::acc(adj, nodes, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::Mean { x } => {
                let d = dout[0] / nodes[x.0].data.len() as f64;
                Self::acc(adj, nodes, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let [r, c] = nodes[x.0].shape[..] else { unreachable!() };
                let denom = match &nodes[i].op {
                    Op::MeanAxis { .. } => (if *axis == 0 { r } else { c }) as f64,
                    _ => 1.0,
                };
                let axis = *axis;
                Self::acc(adj, nodes, *x, |g| {
                    for row in 0..r {
                        for col in 0..c {
                            let d = if axis == 0 { dout[col] } else { dout[row] };
                            g[row * c + col] += d / denom;
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let [c, r] = nodes[i].shape[..] else { unreachable!() };
                let dt = transpose_raw(dout, c, r);
                Self::acc(adj, nodes, *x, |g| {
                    for (gi, d) in g.iter_mut().zip(&dt) {
                        *gi += d;
                    }
                });
            }
            Op::Reshape { x } => {
                Self::acc(adj, nodes, *x, |g| {
                    for (gi, d) in g.iter_mut().zip(dout) {
                        *gi += d;
                    }
                });
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &v in xs {
                    let len = nodes[v.0].data.len();
                    let part = &dout[offset..offset + len];
                    Self::acc(adj, nodes, v, |g| {
                        for (gi, d) in g.iter_mut().zip(part) {
                            *gi += d;
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols { xs } => {
                let total = *nodes[i].shape.last().unwrap();
                let rows = nodes[i].data.len() / total;
                let mut offset = 0;
                for &v in xs {
                    let w = *nodes[v.0].shape.last().unwrap();
                    Self::acc(adj, nodes, v, |g| {
                        for row in 0..rows {
                            for col in 0..w {
                                g[row * w + col] += dout[row * total + offset + col];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = *nodes[x.0].shape.last().unwrap();
                let off = start * c;
                Self::acc(adj, nodes, *x, |g| {
                    for (idx, d) in dout.iter().enumerate() {
                        g[off + idx] += d;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = *nodes[x.0].shape.last().unwrap();
                Self::acc(adj, nodes, *x, |g| {
                    for (pos, &row) in idx.iter().enumerate() {
                        for col in 0..c {
                            g[row * c + col] += dout[pos * c + col];
                        }
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let c = *nodes[x.0].shape.last().unwrap();
                let r = nodes[x.0].data.len() / c;
                let sd = &nodes[s.0].data;
                let xd = &nodes[x.0].data;
                Self::acc(adj, nodes, *x, |g| {
                    for row in 0..r {
                        for col in 0..c {
                            g[row * c + col] += dout[row * c + col] * sd[row];
                        }
                    }
                });
                Self::acc(adj, nodes, *s, |g| {
                    for row in 0..r {
                        let mut acc = 0.0;
                        for col in 0..c {
                            acc += dout[row * c + col] * xd[row * c + col];
                        }
                        g[row] += acc;
                    }
                });
            }
            Op::Conv1dSame { x, kernel, bias, seg_len } => {
                let [_, in_c] = nodes[x.0].shape[..] else { unreachable!() };
                let [out_c, _, kw] = nodes[kernel.0].shape[..] else { unreachable!() };
                let rows = nodes[x.0].data.len() / in_c;
                let seg_len = *seg_len;
                let segments = rows / seg_len;
                let pad = (kw - 1) / 2;
                let xd = &nodes[x.0].data;
                let kd = &nodes[kernel.0].data;
                if nodes[bias.0].requires_grad {
                    Self::acc(adj, nodes, *bias, |g| {
                        for row in 0..rows {
                            for oc in 0..out_c {
                                g[oc] += dout[row * out_c + oc];
                            }
                        }
                    });
                }
                if nodes[x.0].requires_grad {
                    Self::acc(adj, nodes, *x, |g| {
                        for tap in 0..kw {
                            for seg in 0..segments {
                                for n in 0..seg_len {
                                    let src = n as isize + tap as isize - pad as isize;
                                    if src < 0 || src >= seg_len as isize {
                                        continue;
                                    }
                                    let xrow = (seg * seg_len + src as usize) * in_c;
                                    let orow = (seg * seg_len + n) * out_c;
                                    for ic in 0..in_c {
                                        let mut acc = 0.0;
                                        for oc in 0..out_c {
                                            acc += dout[orow + oc] * kd[(oc * in_c + ic) * kw + tap];
                                        }
                                        g[xrow + ic] += acc;
                                    }
                                }
                            }
                        }
                    });
                }
                if nodes[kernel.0].requires_grad {
                    Self::acc(adj, nodes, *kernel, |g| {
                        for tap in 0..kw {
                            for seg in 0..segments {
                                for n in 0..seg_len {
                                    let src = n as isize + tap as isize - pad as isize;
                                    if src < 0 || src >= seg_len as isize {
                                        continue;
                                    }
                                    let xrow = (seg * seg_len + src as usize) * in_c;
                                    let orow = (seg * seg_len + n) * out_c;
                                    for oc in 0..out_c {
                                        let d = dout[orow + oc];
                                        for ic in 0..in_c {
                                            g[(oc * in_c + ic) * kw + tap] += d * xd[xrow + ic];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

// ── Adam optimizer ───────────────────────────────────────────────────

/// First/second moment buffers, aligned with a fixed parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters with no gradient buffer are
/// treated as having zero gradient. Gradients are left in place; the caller
/// decides when to reset them.
pub fn adam_step(
    params: &mut [&mut Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    assert_eq!(params.len(), state.m.len(), "optimizer state misaligned");
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (idx, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        assert_eq!(m.len(), p.numel(), "optimizer state misaligned");
        let zero;
        let g: &[f64] = match p.grad() {
            Some(g) => g,
            None => {
                zero = vec![0.0; p.numel()];
                &zero
            }
        };
        let g = g.to_vec();
        let data = p.data_mut();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
