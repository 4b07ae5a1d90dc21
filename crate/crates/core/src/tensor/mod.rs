//! Reverse-mode automatic differentiation over flat f64 tensors.
//!
//! A [`Tape`] records a define-by-run graph: every forward op appends a node
//! holding the output values plus whatever the backward pass needs. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into every node with `requires_grad`.
//!
//! The tape is rebuilt per batch (sequence lengths are data-dependent) and is
//! confined to one worker; parallelism happens across independent tapes over
//! read-only parameter slices, which is why node values can borrow from
//! longer-lived parameter storage via [`Tape::leaf_borrowed`].
//!
//! All values are 64-bit floats. Forward passes are deterministic: the same
//! inputs produce bit-identical outputs. Calling `backward` twice on the same
//! tape is an error (the graph caches would be stale after a parameter
//! update, so the second call is always a bug).

mod check;

pub use check::{grad_check, grad_check_params, GradCheckReport};

use thiserror::Error;

/// Index of a node on a [`Tape`].
pub type TensorId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this tape")]
    BackwardRepeated,
    #[error("{op}: produced or received a non-finite value")]
    NonFinite { op: &'static str },
    #[error("l2_normalize: zero-norm vector")]
    ZeroNorm,
}

enum Values<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl<'p> Values<'p> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Values::Owned(v) => v,
            Values::Borrowed(s) => s,
        }
    }
}

/// Operation kind recorded on the tape. Variants carry whatever forward-pass
/// data the backward rule needs (argmax indices, cached norms, ...).
enum Op {
    Leaf,
    /// C[m,n] = A[m,k] B[k,n]
    MatMul { m: usize, k: usize, n: usize },
    /// o[r] = M[r,c] v[c]
    MatVec { r: usize, c: usize },
    Transpose,
    Add,
    Mul,
    /// ca*a + cb*b, elementwise over same-shape tensors
    Affine { ca: f64, cb: f64 },
    Scale { c: f64 },
    Tanh,
    Sigmoid,
    Relu,
    Sqrt,
    Log,
    Softmax { axis: usize },
    LogSoftmax,
    /// concatenation along axis 0; `lens` are the axis-0 lengths of the inputs
    Concat0 { lens: Vec<usize> },
    /// stack 1-D rows into a matrix
    StackRows,
    /// y[t,f] = sum_{u,q} x[t+u,q] w[f,u,q]
    Conv1d { width: usize },
    AddBiasRows,
    /// max over axis 0 of [T,F]; `argmax[f]` is the first maximal t per column
    MaxOverTime { argmax: Vec<usize> },
    MeanAxis { axis: usize },
    Sum,
    Reshape,
    L2Normalize { norm: f64 },
    SqDist,
    /// s[k] = mi[:,k]^T W mj[:,k]; caches W*mj columns for the backward rule
    BilinearDiag { wmj: Vec<f64> },
    GatherRows { indices: Vec<usize> },
}

struct Node<'p> {
    op: Op,
    inputs: Vec<TensorId>,
    values: Values<'p>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A recorded computation graph in topological order.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y += c * x
fn axpy(y: &mut [f64], c: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    c
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        self.nodes[id].values.as_slice()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if populated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<TensorId>,
        values: Values<'p>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> TensorId {
        debug_assert_eq!(values.as_slice().len(), numel(&shape));
        self.nodes.push(Node {
            op,
            inputs,
            values,
            shape,
            requires_grad,
            grad: None,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── Leaves ─────────────────────────────────────────────────────────

    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(values.len(), numel(&shape), "leaf data must match shape");
        self.push(Op::Leaf, vec![], Values::Owned(values), shape, requires_grad)
    }

    /// Leaf whose storage is borrowed from outside the tape (parameters).
    pub fn leaf_borrowed(
        &mut self,
        values: &'p [f64],
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> TensorId {
        assert_eq!(values.len(), numel(&shape), "leaf data must match shape");
        self.push(Op::Leaf, vec![], Values::Borrowed(values), shape, requires_grad)
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![v], vec![1], false)
    }

    // ── Forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Op::MatMul { m, k, n },
            vec![a, b],
            Values::Owned(values),
            vec![m, n],
            rg,
        ))
    }

    pub fn matvec(&mut self, m: TensorId, v: TensorId) -> Result<TensorId, TensorError> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: sm.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let mv = self.value(m);
        let vv = self.value(v);
        let values: Vec<f64> = (0..r).map(|i| dot(&mv[i * c..(i + 1) * c], vv)).collect();
        let rg = self.any_grad(&[m, v]);
        Ok(self.push(Op::MatVec { r, c }, vec![m, v], Values::Owned(values), vec![r], rg))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "expected a 2-D tensor",
            });
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x);
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Transpose, vec![x], Values::Owned(values), vec![c, r], rg))
    }

    fn elementwise_pair(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise_pair("add", a, b)?;
        let values: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add, vec![a, b], Values::Owned(values), shape, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise_pair("mul", a, b)?;
        let values: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul, vec![a, b], Values::Owned(values), shape, rg))
    }

    /// Elementwise `ca*a + cb*b` with constant coefficients. This is the
    /// mixup interpolation primitive and doubles as subtraction.
    pub fn affine(
        &mut self,
        a: TensorId,
        b: TensorId,
        ca: f64,
        cb: f64,
    ) -> Result<TensorId, TensorError> {
        self.elementwise_pair("affine", a, b)?;
        let values: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| ca * x + cb * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Affine { ca, cb }, vec![a, b], Values::Owned(values), shape, rg))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let values: Vec<f64> = self.value(x).iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Scale { c }, vec![x], Values::Owned(values), shape, rg))
    }

    fn unary(
        &mut self,
        op: Op,
        x: TensorId,
        f: impl Fn(f64) -> f64,
    ) -> Result<TensorId, TensorError> {
        let values: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(op, vec![x], Values::Owned(values), shape, rg))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(Op::Sigmoid, x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    /// Square root. The subgradient at 0 is taken as 0 so that an inactive
    /// hinge upstream (exact zero gradient) never turns into NaN.
    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(Op::Sqrt, x, f64::sqrt)
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(Op::Log, x, f64::ln)
    }

    /// Groups along `axis` of a 1-D or 2-D tensor: (group count, group size,
    /// stride between consecutive elements of a group, stride between groups).
    fn axis_groups(
        op: &'static str,
        shape: &[usize],
        axis: usize,
    ) -> Result<(usize, usize, usize, usize), TensorError> {
        match (shape.len(), axis) {
            (1, 0) => Ok((1, shape[0], 1, 0)),
            (2, 1) => Ok((shape[0], shape[1], 1, shape[1])),
            (2, 0) => Ok((shape[1], shape[0], shape[1], 1)),
            _ => Err(TensorError::BadShape {
                op,
                shape: shape.to_vec(),
                reason: "softmax/mean axis must address a 1-D or 2-D tensor",
            }),
        }
    }

    /// Numerically stable softmax (max-subtracted) over the given axis. The
    /// last element of each group is set to one minus the rest, so every
    /// group sums to exactly 1.0.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let (groups, gsize, estride, gstride) = Self::axis_groups("softmax", &shape, axis)?;
        let xv = self.value(x);
        let mut values = vec![0.0; xv.len()];
        for g in 0..groups {
            let base = g * gstride;
            let mut mx = f64::NEG_INFINITY;
            for e in 0..gsize {
                mx = mx.max(xv[base + e * estride]);
            }
            let mut sum = 0.0;
            for e in 0..gsize {
                let v = (xv[base + e * estride] - mx).exp();
                values[base + e * estride] = v;
                sum += v;
            }
            let mut head = 0.0;
            for e in 0..gsize - 1 {
                let p = values[base + e * estride] / sum;
                values[base + e * estride] = p;
                head += p;
            }
            values[base + (gsize - 1) * estride] = (1.0 - head).max(0.0);
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Softmax { axis }, vec![x], Values::Owned(values), shape, rg))
    }

    /// `x - logsumexp(x)` over a 1-D tensor; stable log of softmax.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 {
            return Err(TensorError::BadShape {
                op: "log_softmax",
                shape,
                reason: "expected a 1-D tensor",
            });
        }
        let xv = self.value(x);
        let mx = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + xv.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let values: Vec<f64> = xv.iter().map(|v| v - lse).collect();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::LogSoftmax, vec![x], Values::Owned(values), shape, rg))
    }

    /// Concatenate along axis 0. Inputs must agree on trailing dimensions.
    pub fn concat0(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!xs.is_empty(), "concat0 needs at least one input");
        let first = self.shape(xs[0]).to_vec();
        let mut lens = Vec::with_capacity(xs.len());
        let mut rows = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat0",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[0]);
            rows += s[0];
        }
        let mut values = Vec::with_capacity(rows * numel(&first[1..]).max(1));
        for &x in xs {
            values.extend_from_slice(self.value(x));
        }
        let mut shape = first;
        shape[0] = rows;
        let rg = self.any_grad(xs);
        Ok(self.push(Op::Concat0 { lens }, xs.to_vec(), Values::Owned(values), shape, rg))
    }

    /// Stack 1-D tensors of equal length into a `[n, k]` matrix.
    pub fn stack_rows(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!xs.is_empty(), "stack_rows needs at least one input");
        let k = {
            let s = self.shape(xs[0]);
            if s.len() != 1 {
                return Err(TensorError::BadShape {
                    op: "stack_rows",
                    shape: s.to_vec(),
                    reason: "expected 1-D inputs",
                });
            }
            s[0]
        };
        let mut values = Vec::with_capacity(xs.len() * k);
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 1 || s[0] != k {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![k],
                    rhs: s.to_vec(),
                });
            }
            values.extend_from_slice(self.value(x));
        }
        let rg = self.any_grad(xs);
        Ok(self.push(Op::StackRows, xs.to_vec(), Values::Owned(values), vec![xs.len(), k], rg))
    }

    /// Valid 1-D convolution over the time axis.
    /// `x: [T, d]`, `filters: [F, w, d]` → `[T-w+1, F]`.
    pub fn conv1d(&mut self, x: TensorId, filters: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sf) = (self.shape(x), self.shape(filters));
        if sx.len() != 2 || sf.len() != 3 || sx[1] != sf[2] || sf[1] > sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sf.to_vec(),
            });
        }
        let (t, d) = (sx[0], sx[1]);
        let (f, w) = (sf[0], sf[1]);
        let t_out = t - w + 1;
        let xv = self.value(x);
        let fv = self.value(filters);
        let mut values = vec![0.0; t_out * f];
        let window = w * d;
        for ti in 0..t_out {
            let xwin = &xv[ti * d..ti * d + window];
            let out = &mut values[ti * f..(ti + 1) * f];
            for (fi, o) in out.iter_mut().enumerate() {
                *o = dot(xwin, &fv[fi * window..(fi + 1) * window]);
            }
        }
        let rg = self.any_grad(&[x, filters]);
        Ok(self.push(
            Op::Conv1d { width: w },
            vec![x, filters],
            Values::Owned(values),
            vec![t_out, f],
            rg,
        ))
    }

    /// `x: [T, F]` plus a bias `[F]` added to every row.
    pub fn add_bias_rows(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_rows",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let f = sx[1];
        let bv = self.value(bias);
        let values: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % f])
            .collect();
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Op::AddBiasRows, vec![x, bias], Values::Owned(values), shape, rg))
    }

    /// Max over the time axis of `[T, F]` → `[F]`. On ties the subgradient
    /// routes to the first maximal index.
    pub fn max_over_time(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::BadShape {
                op: "max_over_time",
                shape: s.to_vec(),
                reason: "expected a non-empty [T, F] tensor",
            });
        }
        let (t, f) = (s[0], s[1]);
        let xv = self.value(x);
        let mut values = vec![f64::NEG_INFINITY; f];
        let mut argmax = vec![0usize; f];
        for ti in 0..t {
            for fi in 0..f {
                let v = xv[ti * f + fi];
                if v > values[fi] {
                    values[fi] = v;
                    argmax[fi] = ti;
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::MaxOverTime { argmax }, vec![x], Values::Owned(values), vec![f], rg))
    }

    /// Mean along `axis` of a 1-D or 2-D tensor.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let (groups, gsize, estride, gstride) = Self::axis_groups("mean_axis", &shape, axis)?;
        if gsize == 0 {
            return Err(TensorError::BadShape {
                op: "mean_axis",
                shape,
                reason: "mean over an empty axis",
            });
        }
        let xv = self.value(x);
        let mut values = vec![0.0; groups];
        for (g, out) in values.iter_mut().enumerate() {
            let base = g * gstride;
            let mut acc = 0.0;
            for e in 0..gsize {
                acc += xv[base + e * estride];
            }
            *out = acc / gsize as f64;
        }
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else if axis == 0 {
            vec![shape[1]]
        } else {
            vec![shape[0]]
        };
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::MeanAxis { axis }, vec![x], Values::Owned(values), out_shape, rg))
    }

    /// Sum of all elements → scalar `[1]`.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let total: f64 = self.value(x).iter().sum();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Sum, vec![x], Values::Owned(vec![total]), vec![1], rg))
    }

    /// Reinterpret the values under a new shape with the same element count.
    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId, TensorError> {
        if numel(&new_shape) != numel(self.shape(x)) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape,
            });
        }
        let values = self.value(x).to_vec();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::Reshape, vec![x], Values::Owned(values), new_shape, rg))
    }

    /// `v / ‖v‖₂` for a 1-D vector. A zero-norm input is an error: it means
    /// an encoder emitted a dead representation.
    pub fn l2_normalize(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(TensorError::BadShape {
                op: "l2_normalize",
                shape: s.to_vec(),
                reason: "expected a 1-D tensor",
            });
        }
        let xv = self.value(x);
        let norm = dot(xv, xv).sqrt();
        if norm < 1e-300 {
            return Err(TensorError::ZeroNorm);
        }
        let values: Vec<f64> = xv.iter().map(|v| v / norm).collect();
        let shape = s.to_vec();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Op::L2Normalize { norm }, vec![x], Values::Owned(values), shape, rg))
    }

    /// Squared Euclidean distance between two 1-D vectors → scalar `[1]`.
    pub fn sq_dist(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise_pair("sq_dist", a, b)?;
        if self.shape(a).len() != 1 {
            return Err(TensorError::BadShape {
                op: "sq_dist",
                shape: self.shape(a).to_vec(),
                reason: "expected 1-D tensors",
            });
        }
        let v: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::SqDist, vec![a, b], Values::Owned(vec![v]), vec![1], rg))
    }

    /// Per-column bilinear form: `s[k] = mi[:,k]^T W mj[:,k]` for
    /// `mi, mj: [d, n]`, `w: [d, d]` → `[n]`.
    pub fn bilinear_diag(
        &mut self,
        mi: TensorId,
        w: TensorId,
        mj: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (si, sw, sj) = (
            self.shape(mi).to_vec(),
            self.shape(w).to_vec(),
            self.shape(mj).to_vec(),
        );
        if si.len() != 2 || sj.len() != 2 || si != sj {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_diag",
                lhs: si,
                rhs: sj,
            });
        }
        if sw.len() != 2 || sw[0] != sw[1] || sw[0] != si[0] {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_diag",
                lhs: si,
                rhs: sw,
            });
        }
        let (d, n) = (si[0], si[1]);
        let (miv, wv, mjv) = (self.value(mi), self.value(w), self.value(mj));
        // wmj[:,k] = W mj[:,k], kept for the backward rule
        let mut wmj = vec![0.0; d * n];
        for p in 0..d {
            let wrow = &wv[p * d..(p + 1) * d];
            for k in 0..n {
                let mut acc = 0.0;
                for q in 0..d {
                    acc += wrow[q] * mjv[q * n + k];
                }
                wmj[p * n + k] = acc;
            }
        }
        let mut values = vec![0.0; n];
        for k in 0..n {
            let mut acc = 0.0;
            for p in 0..d {
                acc += miv[p * n + k] * wmj[p * n + k];
            }
            values[k] = acc;
        }
        let rg = self.any_grad(&[mi, w, mj]);
        Ok(self.push(
            Op::BilinearDiag { wmj },
            vec![mi, w, mj],
            Values::Owned(values),
            vec![n],
            rg,
        ))
    }

    /// Gather rows of `table: [V, d]` by index → `[len, d]`. Repeated indices
    /// accumulate gradient into the same row.
    pub fn gather_rows(
        &mut self,
        table: TensorId,
        indices: &[usize],
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                shape: s.to_vec(),
                reason: "expected a 2-D table",
            });
        }
        let (v, d) = (s[0], s[1]);
        let tv = self.value(table);
        let mut values = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            assert!(ix < v, "gather_rows: index {ix} out of range for table with {v} rows");
            values.extend_from_slice(&tv[ix * d..(ix + 1) * d]);
        }
        let rg = self.nodes[table].requires_grad;
        Ok(self.push(
            Op::GatherRows { indices: indices.to_vec() },
            vec![table],
            Values::Owned(values),
            vec![indices.len(), d],
            rg,
        ))
    }

    // ── Backward ───────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, contribution: &[f64]) {
        let node = &mut self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let grad = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.values.as_slice().len()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn alloc_grad(&mut self, id: TensorId) {
        let node = &mut self.nodes[id];
        if node.requires_grad && node.grad.is_none() {
            node.grad = Some(vec![0.0; node.values.as_slice().len()]);
        }
    }

    /// Reverse pass from a scalar `loss`. Populates `grad` for every node
    /// reachable from the loss with `requires_grad = true`; the gradient of
    /// the loss w.r.t. itself is 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardRepeated);
        }
        if numel(&self.nodes[loss].shape) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        self.backward_done = true;
        if !self.nodes[loss].requires_grad {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss].grad = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.clone().expect("grad checked above");
            let inputs = self.nodes[i].inputs.clone();
            // Pre-allocate so that "reachable with requires_grad" implies a
            // populated grad even when the contribution is identically zero.
            for &inp in &inputs {
                self.alloc_grad(inp);
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (a, b) = (inputs[0], inputs[1]);
                    if self.nodes[a].requires_grad {
                        // dA = G B^T
                        let bv = self.value(b);
                        let mut da = vec![0.0; m * k];
                        for i2 in 0..m {
                            for p in 0..k {
                                da[i2 * k + p] =
                                    dot(&grad[i2 * n..(i2 + 1) * n], &bv[p * n..(p + 1) * n]);
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = A^T G
                        let av = self.value(a);
                        let mut db = vec![0.0; k * n];
                        for i2 in 0..m {
                            for p in 0..k {
                                axpy(
                                    &mut db[p * n..(p + 1) * n],
                                    av[i2 * k + p],
                                    &grad[i2 * n..(i2 + 1) * n],
                                );
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::MatVec { r, c } => {
                    let (r, c) = (*r, *c);
                    let (m, v) = (inputs[0], inputs[1]);
                    if self.nodes[m].requires_grad {
                        let vv = self.value(v);
                        let mut dm = vec![0.0; r * c];
                        for i2 in 0..r {
                            axpy(&mut dm[i2 * c..(i2 + 1) * c], grad[i2], vv);
                        }
                        self.accumulate(m, &dm);
                    }
                    if self.nodes[v].requires_grad {
                        let mv = self.value(m);
                        let mut dv = vec![0.0; c];
                        for i2 in 0..r {
                            axpy(&mut dv, grad[i2], &mv[i2 * c..(i2 + 1) * c]);
                        }
                        self.accumulate(v, &dv);
                    }
                }
                Op::Transpose => {
                    let x = inputs[0];
                    let s = &self.nodes[i].shape; // [c, r] of the output
                    let (c, r) = (s[0], s[1]);
                    let mut dx = vec![0.0; r * c];
                    for j in 0..c {
                        for i2 in 0..r {
                            dx[i2 * c + j] = grad[j * r + i2];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Add => {
                    self.accumulate(inputs[0], &grad);
                    self.accumulate(inputs[1], &grad);
                }
                Op::Mul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    if self.nodes[a].requires_grad {
                        let da: Vec<f64> =
                            grad.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let db: Vec<f64> =
                            grad.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Affine { ca, cb } => {
                    let (ca, cb) = (*ca, *cb);
                    let da: Vec<f64> = grad.iter().map(|g| ca * g).collect();
                    let db: Vec<f64> = grad.iter().map(|g| cb * g).collect();
                    self.accumulate(inputs[0], &da);
                    self.accumulate(inputs[1], &db);
                }
                Op::Scale { c } => {
                    let c = *c;
                    let dx: Vec<f64> = grad.iter().map(|g| c * g).collect();
                    self.accumulate(inputs[0], &dx);
                }
                Op::Tanh => {
                    let y = self.value(i);
                    let dx: Vec<f64> = grad.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    self.accumulate(inputs[0], &dx);
                }
                Op::Sigmoid => {
                    let y = self.value(i);
                    let dx: Vec<f64> = grad.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    self.accumulate(inputs[0], &dx);
                }
                Op::Relu => {
                    let y = self.value(i);
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(y)
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(inputs[0], &dx);
                }
                Op::Sqrt => {
                    let y = self.value(i);
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(y)
                        .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                        .collect();
                    self.accumulate(inputs[0], &dx);
                }
                Op::Log => {
                    let x = self.value(inputs[0]);
                    let dx: Vec<f64> = grad.iter().zip(x).map(|(g, x)| g / x).collect();
                    self.accumulate(inputs[0], &dx);
                }
                Op::Softmax { axis } => {
                    let shape = self.nodes[i].shape.clone();
                    let (groups, gsize, estride, gstride) =
                        Self::axis_groups("softmax", &shape, *axis).expect("validated in forward");
                    let y = self.value(i);
                    let mut dx = vec![0.0; y.len()];
                    for g in 0..groups {
                        let base = g * gstride;
                        let mut inner = 0.0;
                        for e in 0..gsize {
                            let ix = base + e * estride;
                            inner += grad[ix] * y[ix];
                        }
                        for e in 0..gsize {
                            let ix = base + e * estride;
                            dx[ix] = y[ix] * (grad[ix] - inner);
                        }
                    }
                    self.accumulate(inputs[0], &dx);
                }
                Op::LogSoftmax => {
                    let y = self.value(i);
                    let gsum: f64 = grad.iter().sum();
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(y)
                        .map(|(g, y)| g - y.exp() * gsum)
                        .collect();
                    self.accumulate(inputs[0], &dx);
                }
                Op::Concat0 { lens } => {
                    let lens = lens.clone();
                    let row = numel(&self.nodes[i].shape[1..]).max(1);
                    let mut offset = 0;
                    for (&x, &len) in inputs.iter().zip(&lens) {
                        let take = len * row;
                        self.accumulate(x, &grad[offset..offset + take]);
                        offset += take;
                    }
                }
                Op::StackRows => {
                    let k = self.nodes[i].shape[1];
                    for (r, &x) in inputs.iter().enumerate() {
                        self.accumulate(x, &grad[r * k..(r + 1) * k]);
                    }
                }
                Op::Conv1d { width } => {
                    let w = *width;
                    let (x, filt) = (inputs[0], inputs[1]);
                    let t_out = self.nodes[i].shape[0];
                    let f = self.nodes[i].shape[1];
                    let d = self.nodes[x].shape[1];
                    let window = w * d;
                    if self.nodes[x].requires_grad {
                        let fv = self.value(filt);
                        let mut dx = vec![0.0; self.value(x).len()];
                        for ti in 0..t_out {
                            for fi in 0..f {
                                let g = grad[ti * f + fi];
                                if g != 0.0 {
                                    axpy(
                                        &mut dx[ti * d..ti * d + window],
                                        g,
                                        &fv[fi * window..(fi + 1) * window],
                                    );
                                }
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[filt].requires_grad {
                        let xv = self.value(x);
                        let mut df = vec![0.0; self.value(filt).len()];
                        for ti in 0..t_out {
                            let xwin = &xv[ti * d..ti * d + window];
                            for fi in 0..f {
                                let g = grad[ti * f + fi];
                                if g != 0.0 {
                                    axpy(&mut df[fi * window..(fi + 1) * window], g, xwin);
                                }
                            }
                        }
                        self.accumulate(filt, &df);
                    }
                }
                Op::AddBiasRows => {
                    let (x, bias) = (inputs[0], inputs[1]);
                    let f = self.nodes[i].shape[1];
                    self.accumulate(x, &grad);
                    if self.nodes[bias].requires_grad {
                        let mut db = vec![0.0; f];
                        for (ix, g) in grad.iter().enumerate() {
                            db[ix % f] += g;
                        }
                        self.accumulate(bias, &db);
                    }
                }
                Op::MaxOverTime { argmax } => {
                    let argmax = argmax.clone();
                    let x = inputs[0];
                    let f = self.nodes[i].shape[0];
                    let mut dx = vec![0.0; self.value(x).len()];
                    for fi in 0..f {
                        dx[argmax[fi] * f + fi] = grad[fi];
                    }
                    self.accumulate(x, &dx);
                }
                Op::MeanAxis { axis } => {
                    let x = inputs[0];
                    let shape = self.nodes[x].shape.clone();
                    let (groups, gsize, estride, gstride) =
                        Self::axis_groups("mean_axis", &shape, *axis)
                            .expect("validated in forward");
                    let mut dx = vec![0.0; self.value(x).len()];
                    let inv = 1.0 / gsize as f64;
                    for g in 0..groups {
                        let base = g * gstride;
                        for e in 0..gsize {
                            dx[base + e * estride] = grad[g] * inv;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Sum => {
                    let x = inputs[0];
                    let dx = vec![grad[0]; self.value(x).len()];
                    self.accumulate(x, &dx);
                }
                Op::Reshape => {
                    self.accumulate(inputs[0], &grad);
                }
                Op::L2Normalize { norm } => {
                    let norm = *norm;
                    let u = self.value(i);
                    let ug = dot(u, &grad);
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(u)
                        .map(|(g, u)| (g - u * ug) / norm)
                        .collect();
                    self.accumulate(inputs[0], &dx);
                }
                Op::SqDist => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let g = grad[0];
                    let diff: Vec<f64> = self
                        .value(a)
                        .iter()
                        .zip(self.value(b))
                        .map(|(x, y)| 2.0 * g * (x - y))
                        .collect();
                    self.accumulate(a, &diff);
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::BilinearDiag { wmj } => {
                    let wmj = wmj.clone();
                    let (mi, w, mj) = (inputs[0], inputs[1], inputs[2]);
                    let d = self.nodes[mi].shape[0];
                    let n = self.nodes[mi].shape[1];
                    if self.nodes[mi].requires_grad {
                        // dMi[:,k] = g_k * (W mj[:,k])
                        let mut dmi = vec![0.0; d * n];
                        for p in 0..d {
                            for k in 0..n {
                                dmi[p * n + k] = grad[k] * wmj[p * n + k];
                            }
                        }
                        self.accumulate(mi, &dmi);
                    }
                    if self.nodes[w].requires_grad {
                        // dW += sum_k g_k * mi[:,k] mj[:,k]^T
                        let miv = self.value(mi).to_vec();
                        let mjv = self.value(mj).to_vec();
                        let mut dw = vec![0.0; d * d];
                        for k in 0..n {
                            let g = grad[k];
                            if g == 0.0 {
                                continue;
                            }
                            let mjcol: Vec<f64> = (0..d).map(|q| mjv[q * n + k]).collect();
                            for p in 0..d {
                                axpy(&mut dw[p * d..(p + 1) * d], g * miv[p * n + k], &mjcol);
                            }
                        }
                        self.accumulate(w, &dw);
                    }
                    if self.nodes[mj].requires_grad {
                        // dMj[:,k] = g_k * (W^T mi[:,k])
                        let wv = self.value(w).to_vec();
                        let miv = self.value(mi).to_vec();
                        let mut dmj = vec![0.0; d * n];
                        for k in 0..n {
                            let g = grad[k];
                            for q in 0..d {
                                let mut acc = 0.0;
                                for p in 0..d {
                                    acc += wv[p * d + q] * miv[p * n + k];
                                }
                                dmj[q * n + k] = g * acc;
                            }
                        }
                        self.accumulate(mj, &dmj);
                    }
                }
                Op::GatherRows { indices } => {
                    let indices = indices.clone();
                    let table = inputs[0];
                    let d = self.nodes[i].shape[1];
                    let mut dt = vec![0.0; self.value(table).len()];
                    for (r, &ix) in indices.iter().enumerate() {
                        axpy(&mut dt[ix * d..(ix + 1) * d], 1.0, &grad[r * d..(r + 1) * d]);
                    }
                    self.accumulate(table, &dt);
                }
            }
        }
        Ok(())
    }
}
