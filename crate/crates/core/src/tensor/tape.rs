//! Recording tape for reverse-mode differentiation.
//!
//! Operations are evaluated eagerly as they are recorded, so a [`Var`] always
//! has a value. `grad` builds the adjoint computation *as new tape nodes*,
//! which means gradients are themselves differentiable — the unrolled EM loop
//! needs this when a gradient-descent M-step sits inside a graph that is later
//! differentiated again by BPTT.

use super::kernels;
use super::{Tensor, LAYER_NORM_EPS, SIGMOID_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Op kind of a tape node. Parent operands live in the node, payload scalars
/// (strides, indices, constants) live here.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Detach,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar(f64),
    MulScalar(f64),
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Tanh,
    Relu,
    ReluMask,
    Softplus,
    /// tensor * scalar-node (parents: [tensor, scalar])
    SMul,
    /// tensor + scalar-node (parents: [tensor, scalar])
    SAdd,
    MatMul {
        ta: bool,
        tb: bool,
    },
    /// [r,c] + [c] broadcast over rows
    AddRowVec,
    /// [r,c] * [c] broadcast over rows
    MulRowVec,
    /// [r,c] - [r] broadcast over columns
    SubColVec,
    /// [r,c] * [r] broadcast over columns
    MulColVec,
    /// [r,c] / [r] broadcast over columns
    DivColVec,
    /// a[m] - b[k] -> [m,k]
    SubCross,
    SumAxis(usize),
    SumAll,
    BcastRows(usize),
    BcastCols(usize),
    /// scalar -> shape of parent 1 (shape donor; its value is unused)
    BcastLike,
    LogSumExpRows,
    SoftmaxRows,
    Transpose,
    Reshape,
    Row(usize),
    EmbedRow {
        index: usize,
        rows: usize,
    },
    Col(usize),
    EmbedCol {
        index: usize,
        cols: usize,
    },
    StackRows,
    ConcatVec,
    Slice1d {
        start: usize,
    },
    Pad1d {
        start: usize,
        total: usize,
    },
    ConcatCols,
    SliceCols {
        start: usize,
        len: usize,
    },
    PadCols {
        start: usize,
        total: usize,
    },
    Conv2d {
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    },
    ConvKernelGrad {
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    },
    /// [c,h,w] + [c] broadcast over the spatial plane
    AddChanVec,
    SumHW,
    BcastHW {
        h: usize,
        w: usize,
    },
}

struct Node {
    op: Op,
    parents: Vec<Var>,
    value: Tensor,
}

/// Tape of recorded operations. Parents always precede children.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Leaves registered as trainable parameters: (caller-side key, leaf var).
    param_leaves: Vec<(usize, Var)>,
    poison: Option<String>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First NaN/Inf produced by any operation, if one occurred.
    pub fn poisoned(&self) -> Option<&str> {
        self.poison.as_deref()
    }

    pub fn param_leaves(&self) -> &[(usize, Var)] {
        &self.param_leaves
    }

    fn push(&mut self, op: Op, parents: Vec<Var>, value: Tensor) -> Var {
        if self.poison.is_none() && !value.all_finite() {
            self.poison = Some(format!("non-finite value produced by {:?}", op));
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op, parents, value });
        Var(id)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Leaf registered as a trainable parameter under a caller-side key.
    pub fn param_leaf(&mut self, key: usize, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.param_leaves.push((key, v));
        v
    }

    /// Identity with no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::Detach, vec![x], value)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "shape mismatch in {:?}: {:?} vs {:?}",
            op,
            ta.shape(),
            tb.shape()
        );
        let data: Vec<f64> = ta.data().iter().zip(tb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(op, vec![a, b], value)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| f(v)).collect());
        self.push(op, vec![x], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(Op::Div, a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Op::Neg, x, |v| -v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::AddScalar(c), x, |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::MulScalar(c), x, |v| v * c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Op::Ln, x, f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Op::Sqrt, x, f64::sqrt)
    }

    /// Elementwise logistic function, clamped to `[SIGMOID_EPS, 1 - SIGMOID_EPS]`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid, x, |v| {
            let s = 1.0 / (1.0 + (-v).exp());
            s.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    fn relu_mask(&mut self, x: Var) -> Var {
        self.unary(Op::ReluMask, x, |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Op::Softplus, x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p())
    }

    /// tensor * scalar-node, broadcast.
    pub fn smul(&mut self, x: Var, s: Var) -> Var {
        assert!(self.value(s).shape().is_empty(), "smul scalar operand must have shape []");
        let sv = self.value(s).item();
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v * sv).collect());
        self.push(Op::SMul, vec![x, s], value)
    }

    /// tensor + scalar-node, broadcast.
    pub fn sadd(&mut self, x: Var, s: Var) -> Var {
        assert!(self.value(s).shape().is_empty(), "sadd scalar operand must have shape []");
        let sv = self.value(s).item();
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v + sv).collect());
        self.push(Op::SAdd, vec![x, s], value)
    }

    // ── Matrix ops ───────────────────────────────────────────────────

    /// Matrix product with logical transposition flags.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d, got {:?}", sa);
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d, got {:?}", sb);
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(ka, kb, "matmul inner extents differ: {} vs {} ({:?} x {:?})", ka, kb, sa, sb);
        let mut out = vec![0.0; m * n];
        kernels::matmul(&mut out, self.value(a).data(), self.value(b).data(), m, ka, n, ta, tb);
        self.push(Op::MatMul { ta, tb }, vec![a, b], Tensor::matrix(m, n, out))
    }

    fn rowvec_op(&mut self, op: Op, x: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(v).shape(), &[c], "row-vector operand must have shape [{}]", c);
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = f(xv[i * c + j], vv[j]);
            }
        }
        self.push(op, vec![x, v], Tensor::matrix(r, c, out))
    }

    fn colvec_op(&mut self, op: Op, x: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(v).shape(), &[r], "column-vector operand must have shape [{}]", r);
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = f(xv[i * c + j], vv[i]);
            }
        }
        self.push(op, vec![x, v], Tensor::matrix(r, c, out))
    }

    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        self.rowvec_op(Op::AddRowVec, x, v, |a, b| a + b)
    }

    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Var {
        self.rowvec_op(Op::MulRowVec, x, v, |a, b| a * b)
    }

    pub fn sub_col_vec(&mut self, x: Var, v: Var) -> Var {
        self.colvec_op(Op::SubColVec, x, v, |a, b| a - b)
    }

    pub fn mul_col_vec(&mut self, x: Var, v: Var) -> Var {
        self.colvec_op(Op::MulColVec, x, v, |a, b| a * b)
    }

    pub fn div_col_vec(&mut self, x: Var, v: Var) -> Var {
        self.colvec_op(Op::DivColVec, x, v, |a, b| a / b)
    }

    /// a[m] - b[k] -> [m,k].
    pub fn sub_cross(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape().len(), 1, "sub_cross lhs must be 1-d");
        assert_eq!(self.value(b).shape().len(), 1, "sub_cross rhs must be 1-d");
        let (m, k) = (self.value(a).numel(), self.value(b).numel());
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                out[i * k + j] = av[i] - bv[j];
            }
        }
        self.push(Op::SubCross, vec![a, b], Tensor::matrix(m, k, out))
    }

    // ── Reductions and broadcasts ────────────────────────────────────

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2, "sum_axis expects a 2-d tensor, got {:?}", t.shape());
        assert!(axis < 2, "invalid axis {} for 2-d tensor", axis);
        let (r, c) = (t.rows(), t.cols());
        let d = t.data();
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += d[i * c + j];
                }
            }
            Tensor::vector(out)
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = d[i * c..(i + 1) * c].iter().sum();
            }
            Tensor::vector(out)
        };
        self.push(Op::SumAxis(axis), vec![x], value)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    /// Sum over a set of axes of a 1-d or 2-d tensor. Summing every axis
    /// yields a scalar. An axis out of range is a dimension error.
    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Var {
        let rank = self.value(x).shape().len();
        for &a in axes {
            assert!(a < rank, "invalid axis {} for rank-{} tensor", a, rank);
        }
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        match (rank, sorted.as_slice()) {
            (_, []) => x,
            (1, [0]) => self.sum_all(x),
            (2, [0]) => self.sum_axis(x, 0),
            (2, [1]) => self.sum_axis(x, 1),
            (2, [0, 1]) => self.sum_all(x),
            _ => unreachable!(),
        }
    }

    fn bcast_rows(&mut self, v: Var, rows: usize) -> Var {
        let t = self.value(v);
        assert_eq!(t.shape().len(), 1, "bcast_rows expects a 1-d tensor");
        let c = t.numel();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(t.data());
        }
        self.push(Op::BcastRows(rows), vec![v], Tensor::matrix(rows, c, out))
    }

    fn bcast_cols(&mut self, v: Var, cols: usize) -> Var {
        let t = self.value(v);
        assert_eq!(t.shape().len(), 1, "bcast_cols expects a 1-d tensor");
        let r = t.numel();
        let mut out = Vec::with_capacity(r * cols);
        for &x in t.data() {
            out.extend(std::iter::repeat(x).take(cols));
        }
        self.push(Op::BcastCols(cols), vec![v], Tensor::matrix(r, cols, out))
    }

    fn bcast_like(&mut self, s: Var, like: Var) -> Var {
        assert!(self.value(s).shape().is_empty(), "bcast_like source must be scalar");
        let value = Tensor::filled(self.value(like).shape().to_vec(), self.value(s).item());
        self.push(Op::BcastLike, vec![s, like], value)
    }

    // ── Row-wise softmax family ──────────────────────────────────────

    /// Per-row `ln sum_j exp(x_ij)`, computed with max subtraction.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        assert!(c >= 1, "logsumexp_rows needs at least one column");
        let d = t.data();
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            out[i] = m + s.ln();
        }
        self.push(Op::LogSumExpRows, vec![x], Tensor::vector(out))
    }

    /// Per-row softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        assert!(c >= 1, "softmax_rows needs at least one column");
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        self.push(Op::SoftmaxRows, vec![x], Tensor::matrix(r, c, out))
    }

    // ── Structure ────────────────────────────────────────────────────

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Op::Transpose, vec![x], Tensor::matrix(c, r, out))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        assert_eq!(t.numel(), numel, "reshape {:?} -> {:?} changes element count", t.shape(), shape);
        let value = Tensor::new(shape, t.data().to_vec());
        self.push(Op::Reshape, vec![x], value)
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        assert!(index < r, "row index {} out of range for {} rows", index, r);
        let value = Tensor::vector(t.data()[index * c..(index + 1) * c].to_vec());
        self.push(Op::Row(index), vec![x], value)
    }

    fn embed_row(&mut self, v: Var, index: usize, rows: usize) -> Var {
        let t = self.value(v);
        assert_eq!(t.shape().len(), 1, "embed_row expects a 1-d tensor");
        let c = t.numel();
        let mut out = vec![0.0; rows * c];
        out[index * c..(index + 1) * c].copy_from_slice(t.data());
        self.push(Op::EmbedRow { index, rows }, vec![v], Tensor::matrix(rows, c, out))
    }

    pub fn col(&mut self, x: Var, index: usize) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        assert!(index < c, "col index {} out of range for {} cols", index, c);
        let d = t.data();
        let out: Vec<f64> = (0..r).map(|i| d[i * c + index]).collect();
        self.push(Op::Col(index), vec![x], Tensor::vector(out))
    }

    fn embed_col(&mut self, v: Var, index: usize, cols: usize) -> Var {
        let t = self.value(v);
        assert_eq!(t.shape().len(), 1, "embed_col expects a 1-d tensor");
        let r = t.numel();
        let mut out = vec![0.0; r * cols];
        for (i, &x) in t.data().iter().enumerate() {
            out[i * cols + index] = x;
        }
        self.push(Op::EmbedCol { index, cols }, vec![v], Tensor::matrix(r, cols, out))
    }

    /// Stack 1-d vectors of equal length into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let c = self.value(rows[0]).numel();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &v in rows {
            let t = self.value(v);
            assert_eq!(t.shape(), &[c], "stack_rows rows must share length {}", c);
            out.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows.len(), c, out);
        self.push(Op::StackRows, rows.to_vec(), value)
    }

    pub fn concat_vec(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 1, "concat_vec lhs must be 1-d");
        assert_eq!(tb.shape().len(), 1, "concat_vec rhs must be 1-d");
        let mut out = ta.data().to_vec();
        out.extend_from_slice(tb.data());
        self.push(Op::ConcatVec, vec![a, b], Tensor::vector(out))
    }

    pub fn slice1d(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 1, "slice1d expects a 1-d tensor");
        assert!(start + len <= t.numel(), "slice1d [{}, {}) out of range", start, start + len);
        let value = Tensor::vector(t.data()[start..start + len].to_vec());
        self.push(Op::Slice1d { start }, vec![x], value)
    }

    fn pad1d(&mut self, x: Var, start: usize, total: usize) -> Var {
        let t = self.value(x);
        let mut out = vec![0.0; total];
        out[start..start + t.numel()].copy_from_slice(t.data());
        self.push(Op::Pad1d { start, total }, vec![x], Tensor::vector(out))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = (self.value(a).rows(), self.value(a).cols());
        let (rb, cb) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(ra, rb, "concat_cols operands must share row count");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push(Op::ConcatCols, vec![a, b], Tensor::matrix(ra, ca + cb, out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        assert!(start + len <= c, "slice_cols [{}, {}) out of range", start, start + len);
        let d = t.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { start, len }, vec![x], Tensor::matrix(r, len, out))
    }

    fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let d = t.data();
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            out[i * total + start..i * total + start + c].copy_from_slice(&d[i * c..(i + 1) * c]);
        }
        self.push(Op::PadCols { start, total }, vec![x], Tensor::matrix(r, total, out))
    }

    // ── Convolution family ───────────────────────────────────────────

    /// Cross-correlation with zero padding. x: [ci,h,w], kernel: [co,ci,kh,kw].
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Var {
        let sx = self.value(x).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        assert_eq!(sx.len(), 3, "conv2d input must be [c,h,w], got {:?}", sx);
        assert_eq!(sk.len(), 4, "conv2d kernel must be [o,c,kh,kw], got {:?}", sk);
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let (co, kci, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        assert_eq!(ci, kci, "conv2d channel mismatch: input {} vs kernel {}", ci, kci);
        assert!(
            kh <= h + 2 * pad && kw <= w + 2 * pad,
            "conv2d kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            w + 2 * pad
        );
        let ho = kernels::conv_out_extent(h, kh, stride, pad);
        let wo = kernels::conv_out_extent(w, kw, stride, pad);
        let mut out = vec![0.0; co * ho * wo];
        kernels::conv2d(&mut out, self.value(x).data(), self.value(kernel).data(), ci, h, w, co, kh, kw, stride, pad);
        self.push(Op::Conv2d { stride, pad }, vec![x, kernel], Tensor::new(vec![co, ho, wo], out))
    }

    /// Transposed convolution. g: [co,ho,wo], kernel: [co,ci,kh,kw] -> [ci,out_h,out_w].
    pub fn conv2d_transpose(
        &mut self,
        g: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Var {
        let sg = self.value(g).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        assert_eq!(sg.len(), 3, "conv2d_transpose input must be [c,h,w], got {:?}", sg);
        assert_eq!(sk.len(), 4, "conv2d_transpose kernel must be [o,c,kh,kw], got {:?}", sk);
        let (co, ho, wo) = (sg[0], sg[1], sg[2]);
        let (kco, ci, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        assert_eq!(co, kco, "conv2d_transpose channel mismatch: input {} vs kernel {}", co, kco);
        assert_eq!(
            kernels::conv_out_extent(out_h, kh, stride, pad),
            ho,
            "conv2d_transpose output height {} inconsistent with input height {}",
            out_h,
            ho
        );
        assert_eq!(
            kernels::conv_out_extent(out_w, kw, stride, pad),
            wo,
            "conv2d_transpose output width {} inconsistent with input width {}",
            out_w,
            wo
        );
        let mut out = vec![0.0; ci * out_h * out_w];
        kernels::conv2d_transpose(
            &mut out,
            self.value(g).data(),
            self.value(kernel).data(),
            co,
            ho,
            wo,
            ci,
            out_h,
            out_w,
            kh,
            kw,
            stride,
            pad,
        );
        self.push(
            Op::ConvT2d { stride, pad, out_h, out_w },
            vec![g, kernel],
            Tensor::new(vec![ci, out_h, out_w], out),
        )
    }

    /// dk[o,c,a,b] = sum_{i,j} g[o,i,j] * x[c, i*s-p+a, j*s-p+b].
    fn conv_kernel_grad(&mut self, x: Var, g: Var, stride: usize, pad: usize, kh: usize, kw: usize) -> Var {
        let sx = self.value(x).shape().to_vec();
        let sg = self.value(g).shape().to_vec();
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let (co, ho, wo) = (sg[0], sg[1], sg[2]);
        let mut out = vec![0.0; co * ci * kh * kw];
        kernels::conv2d_kernel_grad(
            &mut out,
            self.value(x).data(),
            self.value(g).data(),
            ci,
            h,
            w,
            co,
            ho,
            wo,
            kh,
            kw,
            stride,
            pad,
        );
        self.push(
            Op::ConvKernelGrad { stride, pad, kh, kw },
            vec![x, g],
            Tensor::new(vec![co, ci, kh, kw], out),
        )
    }

    pub fn add_chan_vec(&mut self, x: Var, b: Var) -> Var {
        let sx = self.value(x).shape().to_vec();
        assert_eq!(sx.len(), 3, "add_chan_vec input must be [c,h,w]");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        assert_eq!(self.value(b).shape(), &[c], "add_chan_vec bias must have shape [{}]", c);
        let xd = self.value(x).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let bias = bd[ch];
            for i in 0..h * w {
                out[ch * h * w + i] = xd[ch * h * w + i] + bias;
            }
        }
        self.push(Op::AddChanVec, vec![x, b], Tensor::new(vec![c, h, w], out))
    }

    fn sum_hw(&mut self, x: Var) -> Var {
        let sx = self.value(x).shape().to_vec();
        assert_eq!(sx.len(), 3, "sum_hw input must be [c,h,w]");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let d = self.value(x).data();
        let out: Vec<f64> = (0..c).map(|ch| d[ch * h * w..(ch + 1) * h * w].iter().sum()).collect();
        self.push(Op::SumHW, vec![x], Tensor::vector(out))
    }

    fn bcast_hw(&mut self, v: Var, h: usize, w: usize) -> Var {
        let t = self.value(v);
        assert_eq!(t.shape().len(), 1, "bcast_hw expects a 1-d tensor");
        let c = t.numel();
        let mut out = Vec::with_capacity(c * h * w);
        for &x in t.data() {
            out.extend(std::iter::repeat(x).take(h * w));
        }
        self.push(Op::BcastHW { h, w }, vec![v], Tensor::new(vec![c, h, w], out))
    }

    // ── Composite ops ────────────────────────────────────────────────

    /// Row-wise layer normalization: per row, `(x - mean) / sqrt(var + eps)`
    /// scaled by `gain` and shifted by `bias` (both of length `cols`).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let c = self.value(x).cols();
        assert!(c >= 1, "layer_norm_rows needs at least one column");
        let inv_c = 1.0 / c as f64;
        let sums = self.sum_axis(x, 1);
        let mu = self.mul_scalar(sums, inv_c);
        let centered = self.sub_col_vec(x, mu);
        let sq = self.mul(centered, centered);
        let sq_sums = self.sum_axis(sq, 1);
        let var = self.mul_scalar(sq_sums, inv_c);
        let var_eps = self.add_scalar(var, LAYER_NORM_EPS);
        let std = self.sqrt(var_eps);
        let normed = self.div_col_vec(centered, std);
        let scaled = self.mul_row_vec(normed, gain);
        self.add_row_vec(scaled, bias)
    }

    // ── Reverse mode ─────────────────────────────────────────────────

    /// Build the adjoint graph of `root` with respect to `wrt`, holding every
    /// node in `stop` constant (its value still participates; no gradient
    /// flows through it). Returns one gradient `Var` per `wrt` entry, `None`
    /// where no differentiable path exists.
    ///
    /// The adjoints are ordinary tape nodes, so the returned gradients can be
    /// used in further computation and differentiated again.
    pub fn grad(&mut self, root: Var, wrt: &[Var], stop: &[Var]) -> Vec<Option<Var>> {
        assert!(
            self.value(root).shape().is_empty(),
            "grad root must be a scalar, got shape {:?}",
            self.value(root).shape()
        );
        let n0 = self.nodes.len();
        if wrt.is_empty() {
            return vec![];
        }
        let min_wrt = wrt.iter().map(|v| v.0).min().unwrap();

        // Nodes through which differentiable influence of `wrt` can flow.
        let mut desc = vec![false; n0];
        for v in wrt {
            desc[v.0] = true;
        }
        for s in stop {
            desc[s.0] = false;
        }
        let stop_set: Vec<usize> = stop.iter().map(|v| v.0).collect();
        for i in min_wrt..n0 {
            if desc[i] || stop_set.contains(&i) {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Detach) {
                continue;
            }
            desc[i] = self.nodes[i].parents.iter().any(|p| desc[p.0]);
        }

        // Nodes the root depends on.
        let mut anc = vec![false; n0];
        anc[root.0] = true;
        for i in (min_wrt..=root.0).rev() {
            if anc[i] {
                for p in self.nodes[i].parents.clone() {
                    anc[p.0] = true;
                }
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; n0];
        adjoint[root.0] = Some(self.scalar(1.0));

        for i in (min_wrt..=root.0).rev() {
            if !(anc[i] && desc[i]) {
                continue;
            }
            let adj = match adjoint[i] {
                Some(a) => a,
                None => continue,
            };
            if stop_set.contains(&i) {
                continue;
            }
            let parents = self.nodes[i].parents.clone();
            for (slot, p) in parents.iter().enumerate() {
                if !desc[p.0] {
                    continue;
                }
                if let Some(contrib) = self.vjp(i, adj, slot) {
                    adjoint[p.0] = Some(match adjoint[p.0] {
                        Some(acc) => self.add(acc, contrib),
                        None => contrib,
                    });
                }
            }
        }

        wrt.iter().map(|v| adjoint[v.0]).collect()
    }

    /// Gradient of a scalar root with respect to every registered parameter
    /// leaf, as plain tensors keyed by the caller-side parameter key.
    /// Parameters with no path to the root get zero gradients.
    pub fn param_gradients(&mut self, root: Var) -> Vec<(usize, Tensor)> {
        let leaves = self.param_leaves.clone();
        let vars: Vec<Var> = leaves.iter().map(|&(_, v)| v).collect();
        let grads = self.grad(root, &vars, &[]);
        leaves
            .iter()
            .zip(grads)
            .map(|(&(key, v), g)| {
                let t = match g {
                    Some(gv) => self.value(gv).clone(),
                    None => Tensor::zeros(self.value(v).shape().to_vec()),
                };
                (key, t)
            })
            .collect()
    }

    /// Adjoint contribution of node `i` to its parent in `slot`, given the
    /// adjoint `adj` of the node itself.
    fn vjp(&mut self, i: usize, adj: Var, slot: usize) -> Option<Var> {
        let op = self.nodes[i].op.clone();
        let parents = self.nodes[i].parents.clone();
        let out = Var(i);
        match op {
            Op::Leaf | Op::Detach | Op::ReluMask => None,
            Op::BcastLike => {
                if slot == 0 {
                    Some(self.sum_all(adj))
                } else {
                    None
                }
            }
            Op::Add => Some(adj),
            Op::Sub => {
                if slot == 0 {
                    Some(adj)
                } else {
                    Some(self.neg(adj))
                }
            }
            Op::Mul => {
                let other = parents[1 - slot];
                Some(self.mul(adj, other))
            }
            Op::Div => {
                let b = parents[1];
                if slot == 0 {
                    Some(self.div(adj, b))
                } else {
                    let q = self.div(out, b);
                    let m = self.mul(adj, q);
                    Some(self.neg(m))
                }
            }
            Op::Neg => Some(self.neg(adj)),
            Op::AddScalar(_) => Some(adj),
            Op::MulScalar(c) => Some(self.mul_scalar(adj, c)),
            Op::Exp => Some(self.mul(adj, out)),
            Op::Ln => Some(self.div(adj, parents[0])),
            Op::Sqrt => {
                let two_y = self.mul_scalar(out, 2.0);
                Some(self.div(adj, two_y))
            }
            Op::Sigmoid => {
                let n = self.neg(out);
                let one_minus = self.add_scalar(n, 1.0);
                let deriv = self.mul(out, one_minus);
                Some(self.mul(adj, deriv))
            }
            Op::Tanh => {
                let sq = self.mul(out, out);
                let nsq = self.neg(sq);
                let deriv = self.add_scalar(nsq, 1.0);
                Some(self.mul(adj, deriv))
            }
            Op::Relu => {
                let mask = self.relu_mask(parents[0]);
                Some(self.mul(adj, mask))
            }
            Op::Softplus => {
                let s = self.sigmoid(parents[0]);
                Some(self.mul(adj, s))
            }
            Op::SMul => {
                let (x, s) = (parents[0], parents[1]);
                if slot == 0 {
                    Some(self.smul(adj, s))
                } else {
                    let prod = self.mul(adj, x);
                    Some(self.sum_all(prod))
                }
            }
            Op::SAdd => {
                if slot == 0 {
                    Some(adj)
                } else {
                    Some(self.sum_all(adj))
                }
            }
            Op::MatMul { ta, tb } => {
                let (a, b) = (parents[0], parents[1]);
                if slot == 0 {
                    if ta {
                        Some(self.matmul(b, adj, tb, true))
                    } else {
                        Some(self.matmul(adj, b, false, !tb))
                    }
                } else if tb {
                    Some(self.matmul(adj, a, true, ta))
                } else {
                    Some(self.matmul(a, adj, !ta, false))
                }
            }
            Op::AddRowVec => {
                if slot == 0 {
                    Some(adj)
                } else {
                    Some(self.sum_axis(adj, 0))
                }
            }
            Op::MulRowVec => {
                let (x, v) = (parents[0], parents[1]);
                if slot == 0 {
                    Some(self.mul_row_vec(adj, v))
                } else {
                    let prod = self.mul(adj, x);
                    Some(self.sum_axis(prod, 0))
                }
            }
            Op::SubColVec => {
                if slot == 0 {
                    Some(adj)
                } else {
                    let s = self.sum_axis(adj, 1);
                    Some(self.neg(s))
                }
            }
            Op::MulColVec => {
                let (x, v) = (parents[0], parents[1]);
                if slot == 0 {
                    Some(self.mul_col_vec(adj, v))
                } else {
                    let prod = self.mul(adj, x);
                    Some(self.sum_axis(prod, 1))
                }
            }
            Op::DivColVec => {
                let v = parents[1];
                if slot == 0 {
                    Some(self.div_col_vec(adj, v))
                } else {
                    let prod = self.mul(adj, out);
                    let s = self.sum_axis(prod, 1);
                    let q = self.div(s, v);
                    Some(self.neg(q))
                }
            }
            Op::SubCross => {
                if slot == 0 {
                    Some(self.sum_axis(adj, 1))
                } else {
                    let s = self.sum_axis(adj, 0);
                    Some(self.neg(s))
                }
            }
            Op::SumAxis(0) => {
                let rows = self.value(parents[0]).rows();
                Some(self.bcast_rows(adj, rows))
            }
            Op::SumAxis(_) => {
                let cols = self.value(parents[0]).cols();
                Some(self.bcast_cols(adj, cols))
            }
            Op::SumAll => Some(self.bcast_like(adj, parents[0])),
            Op::BcastRows(_) => Some(self.sum_axis(adj, 0)),
            Op::BcastCols(_) => Some(self.sum_axis(adj, 1)),
            Op::LogSumExpRows => {
                let sm = self.softmax_rows(parents[0]);
                Some(self.mul_col_vec(sm, adj))
            }
            Op::SoftmaxRows => {
                let prod = self.mul(adj, out);
                let dot = self.sum_axis(prod, 1);
                let centered = self.sub_col_vec(adj, dot);
                Some(self.mul(out, centered))
            }
            Op::Transpose => Some(self.transpose(adj)),
            Op::Reshape => {
                let shape = self.value(parents[0]).shape().to_vec();
                Some(self.reshape(adj, shape))
            }
            Op::Row(index) => {
                let rows = self.value(parents[0]).rows();
                Some(self.embed_row(adj, index, rows))
            }
            Op::EmbedRow { index, .. } => Some(self.row(adj, index)),
            Op::Col(index) => {
                let cols = self.value(parents[0]).cols();
                Some(self.embed_col(adj, index, cols))
            }
            Op::EmbedCol { index, .. } => Some(self.col(adj, index)),
            Op::StackRows => Some(self.row(adj, slot)),
            Op::ConcatVec => {
                let na = self.value(parents[0]).numel();
                let nb = self.value(parents[1]).numel();
                if slot == 0 {
                    Some(self.slice1d(adj, 0, na))
                } else {
                    Some(self.slice1d(adj, na, nb))
                }
            }
            Op::Slice1d { start } => {
                let total = self.value(parents[0]).numel();
                Some(self.pad1d(adj, start, total))
            }
            Op::Pad1d { start, .. } => {
                let len = self.value(parents[0]).numel();
                Some(self.slice1d(adj, start, len))
            }
            Op::ConcatCols => {
                let ca = self.value(parents[0]).cols();
                let cb = self.value(parents[1]).cols();
                if slot == 0 {
                    Some(self.slice_cols(adj, 0, ca))
                } else {
                    Some(self.slice_cols(adj, ca, cb))
                }
            }
            Op::SliceCols { start, .. } => {
                let total = self.value(parents[0]).cols();
                Some(self.pad_cols(adj, start, total))
            }
            Op::PadCols { start, .. } => {
                let len = self.value(parents[0]).cols();
                Some(self.slice_cols(adj, start, len))
            }
            Op::Conv2d { stride, pad } => {
                let (x, k) = (parents[0], parents[1]);
                if slot == 0 {
                    let sx = self.value(x).shape().to_vec();
                    Some(self.conv2d_transpose(adj, k, stride, pad, sx[1], sx[2]))
                } else {
                    let sk = self.value(k).shape().to_vec();
                    Some(self.conv_kernel_grad(x, adj, stride, pad, sk[2], sk[3]))
                }
            }
            Op::ConvT2d { stride, pad, .. } => {
                let (g, k) = (parents[0], parents[1]);
                if slot == 0 {
                    Some(self.conv2d(adj, k, stride, pad))
                } else {
                    let sk = self.value(k).shape().to_vec();
                    Some(self.conv_kernel_grad(adj, g, stride, pad, sk[2], sk[3]))
                }
            }
            Op::ConvKernelGrad { stride, pad, .. } => {
                let (x, g) = (parents[0], parents[1]);
                if slot == 0 {
                    let sx = self.value(x).shape().to_vec();
                    Some(self.conv2d_transpose(g, adj, stride, pad, sx[1], sx[2]))
                } else {
                    Some(self.conv2d(x, adj, stride, pad))
                }
            }
            Op::AddChanVec => {
                if slot == 0 {
                    Some(adj)
                } else {
                    Some(self.sum_hw(adj))
                }
            }
            Op::SumHW => {
                let sx = self.value(parents[0]).shape().to_vec();
                Some(self.bcast_hw(adj, sx[1], sx[2]))
            }
            Op::BcastHW { .. } => Some(self.sum_hw(adj)),
        }
    }
}
