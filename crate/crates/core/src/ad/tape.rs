//! Reverse-mode differentiation over dense matrices.
//!
//! Operations executed through a [`Tape`] record one node each, holding the
//! value snapshots their backward rule needs. Nodes are appended in execution
//! order, so every node's parents precede it and a single reverse sweep
//! propagates gradients with one visit per node.
//!
//! Operations whose operands are all constants record nothing and return a
//! constant, which makes the same forward code usable for evaluation at zero
//! tape cost.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::AdError;

use super::tensor::{NodeId, TapeRef, Tensor};

/// Epsilon added to the batch variance before taking the inverse square root.
pub const BN_EPS: f64 = 1e-8;

/// Floor for row norms in L2 row normalization.
const NORM_FLOOR: f64 = 1e-12;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`]: the pre-activation that maps to a given positive value.
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    // ln(e^y - 1), stable for small y via expm1 and for large y via y + ln(1 - e^-y).
    if y > 20.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Thin wrapper over the blocked dgemm kernel; all matrix products go through here.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else if beta != 1.0 {
            for v in &mut c[..m * n] {
                *v *= beta;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Squared Euclidean distances between all row pairs of `a` (na x d) and `b` (nb x d).
pub(crate) fn pairwise_sq_dists(a: &[f64], b: &[f64], na: usize, nb: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; na * nb];
    // -2 A Bᵀ, then add row norms.
    gemm(na, d, nb, -2.0, a, d as isize, 1, b, 1, d as isize, 0.0, &mut out);
    let na_norm: Vec<f64> = (0..na)
        .map(|i| a[i * d..(i + 1) * d].iter().map(|v| v * v).sum())
        .collect();
    let nb_norm: Vec<f64> = (0..nb)
        .map(|j| b[j * d..(j + 1) * d].iter().map(|v| v * v).sum())
        .collect();
    for i in 0..na {
        for j in 0..nb {
            // Guard rounding: a true squared distance is never negative.
            out[i * nb + j] = (out[i * nb + j] + na_norm[i] + nb_norm[j]).max(0.0);
        }
    }
    out
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Rule {
    Leaf,
    MatMul {
        a: Rc<[f64]>,
        b: Rc<[f64]>,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Fused `x · w + bias` (row-broadcast bias).
    Linear {
        a: Rc<[f64]>,
        b: Rc<[f64]>,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias,
    Add,
    Sub,
    Mul {
        a: Rc<[f64]>,
        b: Rc<[f64]>,
    },
    Square {
        x: Rc<[f64]>,
    },
    Elu {
        y: Rc<[f64]>,
    },
    Sigmoid {
        y: Rc<[f64]>,
    },
    Softplus {
        x: Rc<[f64]>,
    },
    Ln {
        x: Rc<[f64]>,
    },
    Exp {
        y: Rc<[f64]>,
    },
    Abs {
        x: Rc<[f64]>,
    },
    ClampMinZero {
        x: Rc<[f64]>,
    },
    Scale {
        c: f64,
    },
    AddScalar,
    Sum,
    Mean {
        count: f64,
    },
    Transpose,
    ConcatCols {
        a_cols: usize,
        b_cols: usize,
    },
    GatherRows {
        indices: Rc<[usize]>,
        src_cols: usize,
    },
    DivScalar {
        x: Rc<[f64]>,
        s: f64,
    },
    L2NormalizeRows {
        y: Rc<[f64]>,
        norms: Rc<[f64]>,
    },
    PairwiseSqDist {
        a: Rc<[f64]>,
        b: Rc<[f64]>,
        d: usize,
    },
    BatchNormTrain {
        x: Rc<[f64]>,
        gamma: Rc<[f64]>,
        mean: Rc<[f64]>,
        inv_std: Rc<[f64]>,
    },
    BatchNormEval {
        xhat: Rc<[f64]>,
        gamma: Rc<[f64]>,
        inv_std: Rc<[f64]>,
    },
}

struct Node {
    rule: Rule,
    parents: [Option<NodeId>; 3],
    rows: usize,
    cols: usize,
}

/// Records operations for one backward sweep.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to tape nodes, indexed by node id.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Box<[f64]>>>,
}

impl Gradients {
    /// Gradient for a tensor, or `None` when the tensor is a constant or no
    /// gradient reached it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let r = t.tape_ref()?;
        if r.tape != self.tape_id {
            return None;
        }
        self.grads.get(r.node).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor, densified to zeros when absent.
    pub fn dense(&self, t: &Tensor) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<(), AdError> {
    // Multiplying by zero maps every finite value to ±0 and any NaN or Inf
    // to NaN, so one vectorizable reduction detects non-finite entries
    // without risking overflow in a plain sum.
    let acc: f64 = values.iter().map(|&v| v * 0.0).sum();
    if acc == 0.0 {
        Ok(())
    } else {
        Err(AdError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a differentiable leaf (a parameter).
    pub fn var(&mut self, rows: usize, cols: usize, values: &[f64]) -> Result<Tensor, AdError> {
        if values.len() != rows * cols {
            return Err(AdError::shape(
                "var",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        check_finite("var", values)?;
        let id = self.push(Rule::Leaf, [None, None, None], rows, cols);
        Ok(Tensor::from_parts(
            rows,
            cols,
            values.to_vec().into(),
            true,
            Some(TapeRef { tape: self.id, node: id }),
        ))
    }

    fn push(&mut self, rule: Rule, parents: [Option<NodeId>; 3], rows: usize, cols: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            rule,
            parents,
            rows,
            cols,
        });
        id
    }

    fn parent_of(&self, op: &'static str, t: &Tensor) -> Result<Option<NodeId>, AdError> {
        match t.tape_ref() {
            None => Ok(None),
            Some(r) if r.tape == self.id => Ok(Some(r.node)),
            Some(_) => Err(AdError::Contract(format!("{op}: tensor belongs to a different tape"))),
        }
    }

    /// Record a node unless every operand is constant.
    fn track(
        &mut self,
        op: &'static str,
        operands: &[&Tensor],
        rows: usize,
        cols: usize,
        rule: impl FnOnce() -> Rule,
    ) -> Result<Option<TapeRef>, AdError> {
        debug_assert!(operands.len() <= 3);
        let mut parents = [None, None, None];
        let mut tracked = false;
        for (slot, t) in parents.iter_mut().zip(operands) {
            *slot = self.parent_of(op, t)?;
            tracked |= slot.is_some();
        }
        if !tracked {
            return Ok(None);
        }
        let id = self.push(rule(), parents, rows, cols);
        Ok(Some(TapeRef { tape: self.id, node: id }))
    }

    fn output(
        &mut self,
        op: &'static str,
        operands: &[&Tensor],
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        rule: impl FnOnce() -> Rule,
    ) -> Result<Tensor, AdError> {
        check_finite(op, &values)?;
        let node = self.track(op, operands, rows, cols, rule)?;
        Ok(Tensor::from_parts(rows, cols, values.into(), false, node))
    }

    // ── Primitives ───────────────────────────────────────────────────

    /// Matrix product `a (m x k) · b (k x n)`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.cols() != b.rows() {
            return Err(AdError::shape(
                "matmul",
                format!("{}x{} . {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
            ));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.values(), k as isize, 1, b.values(), n as isize, 1, 0.0, &mut out);
        let (av, bv) = (a.values_rc(), b.values_rc());
        self.output("matmul", &[a, b], m, n, out, || Rule::MatMul { a: av, b: bv, m, k, n })
    }

    /// Fused affine map `x (m x k) · w (k x n) + bias (1 x n)`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor, AdError> {
        if x.cols() != w.rows() || bias.rows() != 1 || bias.cols() != w.cols() {
            return Err(AdError::shape(
                "linear",
                format!(
                    "x {}x{}, w {}x{}, bias {}x{}",
                    x.rows(),
                    x.cols(),
                    w.rows(),
                    w.cols(),
                    bias.rows(),
                    bias.cols()
                ),
            ));
        }
        let (m, k, n) = (x.rows(), x.cols(), w.cols());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias.values());
        }
        gemm(m, k, n, 1.0, x.values(), k as isize, 1, w.values(), n as isize, 1, 1.0, &mut out);
        let (av, bv) = (x.values_rc(), w.values_rc());
        self.output("linear", &[x, w, bias], m, n, out, || Rule::Linear { a: av, b: bv, m, k, n })
    }

    /// Row-broadcast addition of a `1 x d` bias to an `n x d` matrix.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor, AdError> {
        if bias.rows() != 1 || bias.cols() != x.cols() {
            return Err(AdError::shape(
                "add_bias",
                format!("x {}x{}, bias {}x{}", x.rows(), x.cols(), bias.rows(), bias.cols()),
            ));
        }
        let (n, d) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            out.extend(x.row(r).iter().zip(bias.values()).map(|(&v, &b)| v + b));
        }
        self.output("add_bias", &[x, bias], n, d, out, || Rule::AddBias)
    }

    fn elementwise_pair(
        &mut self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        rule: impl FnOnce(&Tensor, &Tensor) -> Rule,
    ) -> Result<Tensor, AdError> {
        if a.rows() != b.rows() || a.cols() != b.cols() {
            return Err(AdError::shape(
                op,
                format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
            ));
        }
        let out: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rule = rule(a, b);
        self.output(op, &[a, b], a.rows(), a.cols(), out, || rule)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, |_, _| Rule::Add)
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, |_, _| Rule::Sub)
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_pair(
            "mul",
            a,
            b,
            |x, y| x * y,
            |a, b| Rule::Mul {
                a: a.values_rc(),
                b: b.values_rc(),
            },
        )
    }

    fn elementwise_unary(
        &mut self,
        op: &'static str,
        x: &Tensor,
        f: impl Fn(f64) -> f64,
        rule: impl FnOnce(&Tensor, &Rc<[f64]>) -> Rule,
    ) -> Result<Tensor, AdError> {
        let out: Vec<f64> = x.values().iter().map(|&v| f(v)).collect();
        check_finite(op, &out)?;
        let out: Rc<[f64]> = out.into();
        let r = rule(x, &out);
        let node = self.track(op, &[x], x.rows(), x.cols(), || r)?;
        Ok(Tensor::from_parts(x.rows(), x.cols(), out, false, node))
    }

    /// Elementwise square.
    pub fn square(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_unary("square", x, |v| v * v, |x, _| Rule::Square { x: x.values_rc() })
    }

    /// Exponential linear unit with unit slope: `x` for `x > 0`, `e^x - 1` otherwise.
    pub fn elu(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_unary(
            "elu",
            x,
            |v| if v > 0.0 { v } else { v.exp_m1() },
            |_, y| Rule::Elu { y: Rc::clone(y) },
        )
    }

    /// Elementwise logistic function.
    pub fn sigmoid_op(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_unary("sigmoid", x, sigmoid, |_, y| Rule::Sigmoid { y: Rc::clone(y) })
    }

    /// Elementwise softplus.
    pub fn softplus_op(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_unary("softplus", x, softplus, |x, _| Rule::Softplus { x: x.values_rc() })
    }

    /// Elementwise natural logarithm; inputs must be strictly positive.
    pub fn ln(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_unary("ln", x, f64::ln, |x, _| Rule::Ln { x: x.values_rc() })
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_unary("exp", x, f64::exp, |_, y| Rule::Exp { y: Rc::clone(y) })
    }

    /// Elementwise absolute value. The subgradient at 0 is 0.
    pub fn abs(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_unary("abs", x, f64::abs, |x, _| Rule::Abs { x: x.values_rc() })
    }

    /// Elementwise `max(0, x)`; used to guard analytically nonnegative
    /// quantities against rounding.
    pub fn clamp_min_zero(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        self.elementwise_unary(
            "clamp_min_zero",
            x,
            |v| v.max(0.0),
            |x, _| Rule::ClampMinZero { x: x.values_rc() },
        )
    }

    /// Multiplication by a plain constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor, AdError> {
        self.elementwise_unary("scale", x, |v| v * c, |_, _| Rule::Scale { c })
    }

    /// Addition of a plain constant.
    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor, AdError> {
        self.elementwise_unary("add_scalar", x, |v| v + c, |_, _| Rule::AddScalar)
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        let s: f64 = x.values().iter().sum();
        self.output("sum", &[x], 1, 1, vec![s], || Rule::Sum)
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        if x.is_empty() {
            return Err(AdError::shape("mean", "empty tensor".to_string()));
        }
        let count = x.len() as f64;
        let s: f64 = x.values().iter().sum();
        self.output("mean", &[x], 1, 1, vec![s / count], || Rule::Mean { count })
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        let (r, c) = (x.rows(), x.cols());
        let xv = x.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.output("transpose", &[x], c, r, out, || Rule::Transpose)
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.rows() != b.rows() {
            return Err(AdError::shape(
                "concat_cols",
                format!("{} rows vs {} rows", a.rows(), b.rows()),
            ));
        }
        let (n, ca, cb) = (a.rows(), a.cols(), b.cols());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(a.row(r));
            out.extend_from_slice(b.row(r));
        }
        self.output("concat_cols", &[a, b], n, ca + cb, out, || Rule::ConcatCols { a_cols: ca, b_cols: cb })
    }

    /// Select rows of `x` by index (rows may repeat).
    pub fn gather_rows(&mut self, x: &Tensor, indices: &[usize]) -> Result<Tensor, AdError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(AdError::shape(
                "gather_rows",
                format!("index {bad} out of {} rows", x.rows()),
            ));
        }
        let d = x.cols();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(x.row(i));
        }
        let src_cols = x.cols();
        let idx: Rc<[usize]> = indices.to_vec().into();
        self.output("gather_rows", &[x], indices.len(), d, out, || Rule::GatherRows {
            indices: idx,
            src_cols,
        })
    }

    /// Division of every entry of `x` by a 1x1 tensor `s`.
    pub fn div_scalar(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor, AdError> {
        if s.rows() != 1 || s.cols() != 1 {
            return Err(AdError::shape(
                "div_scalar",
                format!("divisor must be 1x1, got {}x{}", s.rows(), s.cols()),
            ));
        }
        let sv = s.item();
        let out: Vec<f64> = x.values().iter().map(|&v| v / sv).collect();
        let xv = x.values_rc();
        self.output("div_scalar", &[x, s], x.rows(), x.cols(), out, || Rule::DivScalar { x: xv, s: sv })
    }

    /// Scale each row to unit Euclidean norm (rows with norm below the floor
    /// are left divided by the floor).
    pub fn l2_normalize_rows(&mut self, x: &Tensor) -> Result<Tensor, AdError> {
        let (n, d) = (x.rows(), x.cols());
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = x.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        check_finite("l2_normalize_rows", &out)?;
        let out: Rc<[f64]> = out.into();
        let y = Rc::clone(&out);
        let norms: Rc<[f64]> = norms.into();
        let node = self.track("l2_normalize_rows", &[x], n, d, || Rule::L2NormalizeRows { y, norms })?;
        Ok(Tensor::from_parts(n, d, out, false, node))
    }

    /// All-pairs squared Euclidean distances between rows of `a` (na x d) and
    /// rows of `b` (nb x d), as an `na x nb` matrix.
    pub fn pairwise_sq_dist(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.cols() != b.cols() {
            return Err(AdError::shape(
                "pairwise_sq_dist",
                format!("{} cols vs {} cols", a.cols(), b.cols()),
            ));
        }
        let (na, nb, d) = (a.rows(), b.rows(), a.cols());
        let out = pairwise_sq_dists(a.values(), b.values(), na, nb, d);
        let (av, bv) = (a.values_rc(), b.values_rc());
        self.output("pairwise_sq_dist", &[a, b], na, nb, out, || Rule::PairwiseSqDist { a: av, b: bv, d })
    }

    /// Batch normalization in training mode: per-feature standardization by
    /// the statistics of the current batch, then learned scale and shift.
    /// Returns the normalized output and the batch statistics so the caller
    /// can fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
    ) -> Result<(Tensor, BatchStats), AdError> {
        let (n, d) = (x.rows(), x.cols());
        if gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d {
            return Err(AdError::shape(
                "batch_norm",
                format!("gamma/beta must be 1x{d}"),
            ));
        }
        if n == 0 {
            return Err(AdError::shape("batch_norm", "empty batch".to_string()));
        }
        let xv = x.values();
        let nf = n as f64;
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                mean[j] += xv[r * d + j];
            }
        }
        for m in &mut mean {
            *m /= nf;
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                let c = xv[r * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in &mut var {
            *v /= nf;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        // Per-feature affine form keeps the normalization pass to one fused
        // multiply-add per entry.
        let scale: Vec<f64> = gamma.values().iter().zip(&inv_std).map(|(&g, &s)| g * s).collect();
        let shift: Vec<f64> = beta
            .values()
            .iter()
            .zip(&scale)
            .zip(&mean)
            .map(|((&b, &a), &m)| b - a * m)
            .collect();
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            out.extend(
                xv[r * d..(r + 1) * d]
                    .iter()
                    .zip(scale.iter().zip(&shift))
                    .map(|(&v, (&a, &b))| a * v + b),
            );
        }
        check_finite("batch_norm", &out)?;
        let xs = x.values_rc();
        let g = gamma.values_rc();
        let mean_rc: Rc<[f64]> = mean.clone().into();
        let inv_std: Rc<[f64]> = inv_std.into();
        let node = self.track("batch_norm", &[x, gamma, beta], n, d, || Rule::BatchNormTrain {
            x: xs,
            gamma: g,
            mean: mean_rc,
            inv_std,
        })?;
        let out = Tensor::from_parts(n, d, out.into(), false, node);
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization in evaluation mode: standardization by frozen
    /// running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Tensor, AdError> {
        let (n, d) = (x.rows(), x.cols());
        if gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d {
            return Err(AdError::shape("batch_norm", format!("gamma/beta must be 1x{d}")));
        }
        if running_mean.len() != d || running_var.len() != d {
            return Err(AdError::shape("batch_norm", format!("running stats must have {d} entries")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xv = x.values();
        let mut xhat = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for j in 0..d {
                let h = (xv[r * d + j] - running_mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(gamma.values()[j] * h + beta.values()[j]);
            }
        }
        check_finite("batch_norm", &out)?;
        let xhat: Rc<[f64]> = xhat.into();
        let inv_std: Rc<[f64]> = inv_std.into();
        let g = gamma.values_rc();
        self.output("batch_norm", &[x, gamma, beta], n, d, out, || Rule::BatchNormEval {
            xhat,
            gamma: g,
            inv_std,
        })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Gradients of a scalar `loss` with respect to every tape node.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, AdError> {
        self.backward_impl(loss, None)
    }

    /// Gradients of a scalar `loss`, propagated only along paths that reach
    /// one of the `targets` (typically the parameter leaves being optimized).
    pub fn backward_for(&self, loss: &Tensor, targets: &[NodeId]) -> Result<Gradients, AdError> {
        self.backward_impl(loss, Some(targets))
    }

    fn backward_impl(&self, loss: &Tensor, targets: Option<&[NodeId]>) -> Result<Gradients, AdError> {
        if loss.rows() != 1 || loss.cols() != 1 {
            return Err(AdError::Contract(format!(
                "backward: loss must be scalar, got {}x{}",
                loss.rows(),
                loss.cols()
            )));
        }
        let mut grads: Vec<Option<Box<[f64]>>> = (0..self.nodes.len()).map(|_| None).collect();
        let loss_node = match loss.tape_ref() {
            None => {
                // A constant loss depends on no parameter: all gradients are zero.
                return Ok(Gradients { tape_id: self.id, grads });
            }
            Some(r) if r.tape != self.id => {
                return Err(AdError::Contract(
                    "backward: loss belongs to a different tape".to_string(),
                ));
            }
            Some(r) => r.node,
        };

        // A node is relevant when a target leaf lies in its input closure;
        // parents precede children, so one forward scan settles all flags.
        let relevant: Vec<bool> = match targets {
            None => vec![true; self.nodes.len()],
            Some(targets) => {
                let mut flags = vec![false; self.nodes.len()];
                for &t in targets {
                    if t < flags.len() {
                        flags[t] = true;
                    }
                }
                for (i, node) in self.nodes.iter().enumerate() {
                    if !flags[i] {
                        flags[i] = node.parents.iter().flatten().any(|&p| flags[p]);
                    }
                }
                flags
            }
        };

        grads[loss_node] = Some(vec![1.0].into_boxed_slice());
        for id in (0..=loss_node).rev() {
            if !relevant[id] || matches!(self.nodes[id].rule, Rule::Leaf) {
                continue;
            }
            // Interior gradients are complete once every consumer (always a
            // higher id) has been processed; take the buffer to free it early.
            let Some(g) = grads[id].take() else { continue };
            self.apply_rule(id, &g, &relevant, &mut grads);
        }
        Ok(Gradients { tape_id: self.id, grads })
    }

    fn apply_rule(&self, id: NodeId, g: &[f64], relevant: &[bool], grads: &mut [Option<Box<[f64]>>]) {
        let node = &self.nodes[id];
        let [p0, p1, p2] = node.parents;
        let wants = |p: Option<NodeId>| p.filter(|&p| relevant[p]);

        // Allocate-or-borrow a parent's accumulator.
        fn acc<'a>(grads: &'a mut [Option<Box<[f64]>>], p: NodeId, len: usize) -> &'a mut [f64] {
            grads[p].get_or_insert_with(|| vec![0.0; len].into_boxed_slice())
        }
        let plen = |p: NodeId| self.nodes[p].rows * self.nodes[p].cols;

        match &node.rule {
            Rule::Leaf => {}
            Rule::MatMul { a, b, m, k, n } | Rule::Linear { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(p) = wants(p0) {
                    // dA += G · Bᵀ
                    let da = acc(grads, p, plen(p));
                    gemm(m, n, k, 1.0, g, n as isize, 1, b, 1, n as isize, 1.0, da);
                }
                if let Some(p) = wants(p1) {
                    // dB += Aᵀ · G
                    let db = acc(grads, p, plen(p));
                    gemm(k, m, n, 1.0, a, 1, k as isize, g, n as isize, 1, 1.0, db);
                }
                if let Some(p) = wants(p2) {
                    // dBias += column sums of G (fused linear only).
                    let db = acc(grads, p, plen(p));
                    for row in g.chunks_exact(n) {
                        for (dv, gv) in db.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                }
            }
            Rule::AddBias => {
                let (n, d) = (node.rows, node.cols);
                if let Some(p) = wants(p0) {
                    let dx = acc(grads, p, plen(p));
                    for (dv, gv) in dx.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if let Some(p) = wants(p1) {
                    let db = acc(grads, p, plen(p));
                    for r in 0..n {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
            }
            Rule::Add => {
                for p in [wants(p0), wants(p1)].into_iter().flatten() {
                    let dp = acc(grads, p, plen(p));
                    for (dv, gv) in dp.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Rule::Sub => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for (dv, gv) in dp.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if let Some(p) = wants(p1) {
                    let dp = acc(grads, p, plen(p));
                    for (dv, gv) in dp.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                }
            }
            Rule::Mul { a, b } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for ((dv, gv), bv) in dp.iter_mut().zip(g).zip(b.iter()) {
                        *dv += gv * bv;
                    }
                }
                if let Some(p) = wants(p1) {
                    let dp = acc(grads, p, plen(p));
                    for ((dv, gv), av) in dp.iter_mut().zip(g).zip(a.iter()) {
                        *dv += gv * av;
                    }
                }
            }
            Rule::Square { x } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for ((dv, gv), xv) in dp.iter_mut().zip(g).zip(x.iter()) {
                        *dv += 2.0 * gv * xv;
                    }
                }
            }
            Rule::Elu { y } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    // For x <= 0 the output is e^x - 1, so the slope is y + 1;
                    // both branches give slope 1 at x = 0.
                    for ((dv, gv), yv) in dp.iter_mut().zip(g).zip(y.iter()) {
                        *dv += gv * if *yv > 0.0 { 1.0 } else { yv + 1.0 };
                    }
                }
            }
            Rule::Sigmoid { y } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for ((dv, gv), yv) in dp.iter_mut().zip(g).zip(y.iter()) {
                        *dv += gv * yv * (1.0 - yv);
                    }
                }
            }
            Rule::Softplus { x } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for i in 0..g.len() {
                        dp[i] += g[i] * sigmoid(x[i]);
                    }
                }
            }
            Rule::Ln { x } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for i in 0..g.len() {
                        dp[i] += g[i] / x[i];
                    }
                }
            }
            Rule::Exp { y } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for i in 0..g.len() {
                        dp[i] += g[i] * y[i];
                    }
                }
            }
            Rule::Abs { x } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for i in 0..g.len() {
                        dp[i] += g[i] * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Rule::ClampMinZero { x } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            dp[i] += g[i];
                        }
                    }
                }
            }
            Rule::Scale { c } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for i in 0..g.len() {
                        dp[i] += g[i] * c;
                    }
                }
            }
            Rule::AddScalar => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for (dv, gv) in dp.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Rule::Sum => {
                if let Some(p) = wants(p0) {
                    let g0 = g[0];
                    let dp = acc(grads, p, plen(p));
                    for dv in dp.iter_mut() {
                        *dv += g0;
                    }
                }
            }
            Rule::Mean { count } => {
                if let Some(p) = wants(p0) {
                    let g0 = g[0] / count;
                    let dp = acc(grads, p, plen(p));
                    for dv in dp.iter_mut() {
                        *dv += g0;
                    }
                }
            }
            Rule::Transpose => {
                if let Some(p) = wants(p0) {
                    // Output is cols x rows of the parent.
                    let (oc, or) = (node.rows, node.cols);
                    let dp = acc(grads, p, plen(p));
                    for i in 0..oc {
                        for j in 0..or {
                            dp[j * oc + i] += g[i * or + j];
                        }
                    }
                }
            }
            Rule::ConcatCols { a_cols, b_cols } => {
                let n = node.rows;
                let total = a_cols + b_cols;
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for r in 0..n {
                        for j in 0..*a_cols {
                            dp[r * a_cols + j] += g[r * total + j];
                        }
                    }
                }
                if let Some(p) = wants(p1) {
                    let dp = acc(grads, p, plen(p));
                    for r in 0..n {
                        for j in 0..*b_cols {
                            dp[r * b_cols + j] += g[r * total + a_cols + j];
                        }
                    }
                }
            }
            Rule::GatherRows { indices, src_cols, .. } => {
                if let Some(p) = wants(p0) {
                    let d = *src_cols;
                    let dp = acc(grads, p, plen(p));
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..d {
                            dp[src * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Rule::DivScalar { x, s } => {
                if let Some(p) = wants(p0) {
                    let dp = acc(grads, p, plen(p));
                    for i in 0..g.len() {
                        dp[i] += g[i] / s;
                    }
                }
                if let Some(p) = wants(p1) {
                    let mut ds = 0.0;
                    for i in 0..g.len() {
                        ds -= g[i] * x[i];
                    }
                    let dp = acc(grads, p, plen(p));
                    dp[0] += ds / (s * s);
                }
            }
            Rule::L2NormalizeRows { y, norms } => {
                if let Some(p) = wants(p0) {
                    let (n, d) = (node.rows, node.cols);
                    let dp = acc(grads, p, plen(p));
                    for r in 0..n {
                        let dot: f64 = (0..d).map(|j| g[r * d + j] * y[r * d + j]).sum();
                        for j in 0..d {
                            dp[r * d + j] += (g[r * d + j] - dot * y[r * d + j]) / norms[r];
                        }
                    }
                }
            }
            Rule::PairwiseSqDist { a, b, d } => {
                let (na, nb, d) = (node.rows, node.cols, *d);
                if let Some(p) = wants(p0) {
                    let da = acc(grads, p, plen(p));
                    // dA = 2 (rowsum(G) ∘ a) - 2 G · B
                    gemm(na, nb, d, -2.0, g, nb as isize, 1, b, d as isize, 1, 1.0, da);
                    for i in 0..na {
                        let rs: f64 = g[i * nb..(i + 1) * nb].iter().sum();
                        for j in 0..d {
                            da[i * d + j] += 2.0 * rs * a[i * d + j];
                        }
                    }
                }
                if let Some(p) = wants(p1) {
                    let db = acc(grads, p, plen(p));
                    // dB = 2 (colsum(G) ∘ b) - 2 Gᵀ · A
                    gemm(nb, na, d, -2.0, g, 1, nb as isize, a, d as isize, 1, 1.0, db);
                    for j in 0..nb {
                        let mut cs = 0.0;
                        for i in 0..na {
                            cs += g[i * nb + j];
                        }
                        for k in 0..d {
                            db[j * d + k] += 2.0 * cs * b[j * d + k];
                        }
                    }
                }
            }
            Rule::BatchNormTrain { x, gamma, mean, inv_std } => {
                let (n, d) = (node.rows, node.cols);
                let nf = n as f64;
                let xhat_at = |r: usize, j: usize| (x[r * d + j] - mean[j]) * inv_std[j];
                if let Some(p) = wants(p2) {
                    let dbeta = acc(grads, p, plen(p));
                    for row in g.chunks_exact(d) {
                        for (dv, gv) in dbeta.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                }
                if let Some(p) = wants(p1) {
                    let dgamma = acc(grads, p, plen(p));
                    for r in 0..n {
                        for j in 0..d {
                            dgamma[j] += g[r * d + j] * xhat_at(r, j);
                        }
                    }
                }
                if let Some(p) = wants(p0) {
                    // Gradient through the batch statistics themselves.
                    let mut mean_gy = vec![0.0; d];
                    let mut mean_gy_xhat = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            let gy = g[r * d + j] * gamma[j];
                            mean_gy[j] += gy;
                            mean_gy_xhat[j] += gy * xhat_at(r, j);
                        }
                    }
                    for j in 0..d {
                        mean_gy[j] /= nf;
                        mean_gy_xhat[j] /= nf;
                    }
                    let dx = acc(grads, p, plen(p));
                    for r in 0..n {
                        for j in 0..d {
                            let gy = g[r * d + j] * gamma[j];
                            dx[r * d + j] +=
                                inv_std[j] * (gy - mean_gy[j] - xhat_at(r, j) * mean_gy_xhat[j]);
                        }
                    }
                }
            }
            Rule::BatchNormEval { xhat, gamma, inv_std } => {
                let (n, d) = (node.rows, node.cols);
                if let Some(p) = wants(p2) {
                    let dbeta = acc(grads, p, plen(p));
                    for r in 0..n {
                        for j in 0..d {
                            dbeta[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(p) = wants(p1) {
                    let dgamma = acc(grads, p, plen(p));
                    for r in 0..n {
                        for j in 0..d {
                            dgamma[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(p) = wants(p0) {
                    let dx = acc(grads, p, plen(p));
                    for r in 0..n {
                        for j in 0..d {
                            dx[r * d + j] += g[r * d + j] * gamma[j] * inv_std[j];
                        }
                    }
                }
            }
        }
    }
}
