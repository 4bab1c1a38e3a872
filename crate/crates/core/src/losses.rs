//! Scalar training objectives, all built on the tape so every term is
//! differentiable: per-arm outcome regression, adjustment and instrument
//! decomposition losses, weighted confounder balancing, the orthogonality
//! penalty on contribution vectors, and the parameter/weight regularizers.
//!
//! Group weights enter every distribution distance as importance weights on
//! the empirical distribution (a weighted mean embedding), normalized to sum
//! one per group, never as a per-vector rescaling of the representations.

use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{BoundModel, LayerCount, TrainForward};

/// Floor inside log-loss to avoid `ln(0)`.
pub const LOG_EPS: f64 = 1e-12;

/// Kernel for the maximum mean discrepancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// Squared distance between weighted group means; keeps training linear
    /// in the group sizes.
    Linear,
    /// Gaussian kernel `exp(-||x-y||^2 / (2 s^2))`.
    Rbf { bandwidth: Bandwidth },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled groups, treated as a constant
    /// (not differentiated through).
    MedianHeuristic,
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Self {
        KernelSpec::Rbf {
            bandwidth: Bandwidth::Fixed(bandwidth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::Rbf {
            bandwidth: Bandwidth::Fixed(s),
        } = self
        {
            if !(*s > 0.0) {
                return Err(Error::Config(format!("rbf bandwidth must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Index bookkeeping for one training batch: units per treatment arm and,
/// within each arm, per outcome class.
#[derive(Debug, Clone)]
pub struct Batch {
    pub arm: [Vec<usize>; 2],
    /// `cells[arm][class]`, classes from the (possibly binarized) outcome.
    pub cells: [[Vec<usize>; 2]; 2],
}

impl Batch {
    pub fn new(t: &[u8], y_class: &[f64]) -> Result<Self> {
        if t.len() != y_class.len() {
            return Err(Error::Contract("t and outcome classes differ in length".into()));
        }
        let mut arm = [Vec::new(), Vec::new()];
        let mut cells = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
        for (i, (&ti, &yi)) in t.iter().zip(y_class).enumerate() {
            if yi != 0.0 && yi != 1.0 {
                return Err(Error::Contract(format!(
                    "outcome class must be 0 or 1, got {yi} at index {i}"
                )));
            }
            arm[ti as usize].push(i);
            cells[ti as usize][yi as usize].push(i);
        }
        Ok(Batch { arm, cells })
    }

    pub fn both_arms_nonempty(&self) -> bool {
        !self.arm[0].is_empty() && !self.arm[1].is_empty()
    }
}

/// Binarize outcomes within each treatment arm at the arm's median; values at
/// or above the median map to 1.
pub fn binarize_by_median(y: &[f64], t: &[u8]) -> Result<Vec<f64>> {
    let mut per_arm: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (&yi, &ti) in y.iter().zip(t) {
        per_arm[ti as usize].push(yi);
    }
    let mut medians = [0.0; 2];
    for k in 0..2 {
        if per_arm[k].is_empty() {
            return Err(Error::DegenerateInput(format!("treatment arm {k} is empty")));
        }
        let v = &mut per_arm[k];
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite outcomes"));
        let n = v.len();
        medians[k] = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
    }
    Ok(y
        .iter()
        .zip(t)
        .map(|(&yi, &ti)| if yi >= medians[ti as usize] { 1.0 } else { 0.0 })
        .collect())
}

// ── Maximum mean discrepancy ─────────────────────────────────────────

fn normalized_weights(tape: &mut Tape, w: Option<&Tensor>, n: usize, side: &str) -> Result<Tensor> {
    match w {
        None => Ok(Tensor::filled(n, 1, 1.0 / n as f64)),
        Some(w) => {
            if w.rows() != n || w.cols() != 1 {
                return Err(Error::Contract(format!(
                    "{side} weights must be {n}x1, got {}x{}",
                    w.rows(),
                    w.cols()
                )));
            }
            if w.values().iter().any(|&v| v < 0.0) {
                return Err(Error::Contract(format!("{side} weights must be nonnegative")));
            }
            let total: f64 = w.values().iter().sum();
            if total <= 0.0 {
                return Err(Error::DegenerateInput(format!("{side} weights sum to zero")));
            }
            let s = tape.sum(w)?;
            Ok(tape.div_scalar(w, &s)?)
        }
    }
}

fn median_pairwise_distance(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.cols();
    let mut pooled: Vec<f64> = Vec::with_capacity((a.rows() + b.rows()) * d);
    pooled.extend_from_slice(a.values());
    pooled.extend_from_slice(b.values());
    let n = a.rows() + b.rows();
    let sq = crate::ad::pairwise_sq_dists(&pooled, &pooled, n, n, d);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq[i * n + j].sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite distances"));
    let m = *median;
    if m.is_finite() && m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Weighted maximum mean discrepancy between the rows of `a` and `b`.
///
/// Weights default to uniform and are normalized to sum one per group. The
/// linear kernel gives the squared distance between weighted group means; the
/// Gaussian kernel gives the weighted kernel double-sum estimate, clamped at
/// zero against rounding.
pub fn mmd(
    tape: &mut Tape,
    a: &Tensor,
    b: &Tensor,
    w_a: Option<&Tensor>,
    w_b: Option<&Tensor>,
    kernel: &KernelSpec,
) -> Result<Tensor> {
    kernel.validate()?;
    if a.cols() != b.cols() {
        return Err(Error::Contract(format!(
            "mmd: dimension mismatch {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::DegenerateInput("mmd: empty sample group".into()));
    }
    let wa = normalized_weights(tape, w_a, a.rows(), "group a")?;
    let wb = normalized_weights(tape, w_b, b.rows(), "group b")?;

    match kernel {
        KernelSpec::Linear => {
            let wat = tape.transpose(&wa)?;
            let wbt = tape.transpose(&wb)?;
            let mean_a = tape.matmul(&wat, a)?;
            let mean_b = tape.matmul(&wbt, b)?;
            let diff = tape.sub(&mean_a, &mean_b)?;
            let sq = tape.square(&diff)?;
            Ok(tape.sum(&sq)?)
        }
        KernelSpec::Rbf { bandwidth } => {
            let sigma = match bandwidth {
                Bandwidth::Fixed(s) => *s,
                Bandwidth::MedianHeuristic => median_pairwise_distance(a, b),
            };
            let scale = -0.5 / (sigma * sigma);
            let mut quad = |x: &Tensor, y: &Tensor, wx: &Tensor, wy: &Tensor| -> Result<Tensor> {
                let d2 = tape.pairwise_sq_dist(x, y)?;
                let scaled = tape.scale(&d2, scale)?;
                let k = tape.exp(&scaled)?;
                let wxt = tape.transpose(wx)?;
                let row = tape.matmul(&wxt, &k)?;
                let rowt = tape.transpose(&row)?;
                let prod = tape.mul(&rowt, wy)?;
                Ok(tape.sum(&prod)?)
            };
            let s_aa = quad(a, a, &wa, &wa)?;
            let s_bb = quad(b, b, &wb, &wb)?;
            let s_ab = quad(a, b, &wa, &wb)?;
            let sum = tape.add(&s_aa, &s_bb)?;
            let cross = tape.scale(&s_ab, -2.0)?;
            let total = tape.add(&sum, &cross)?;
            Ok(tape.clamp_min_zero(&total)?)
        }
    }
}

// ── Per-element prediction losses ────────────────────────────────────

/// Per-element loss column: log-loss for binary targets, squared error
/// otherwise.
fn prediction_loss_vec(tape: &mut Tape, target: &[f64], pred: &Tensor, binary: bool) -> Result<Tensor> {
    if pred.rows() != target.len() || pred.cols() != 1 {
        return Err(Error::Contract(format!(
            "prediction loss: predictions are {}x{}, targets have {} entries",
            pred.rows(),
            pred.cols(),
            target.len()
        )));
    }
    let y = Tensor::column(target.to_vec())?;
    if binary {
        let p_eps = tape.add_scalar(pred, LOG_EPS)?;
        let ln_p = tape.ln(&p_eps)?;
        let neg_p = tape.scale(pred, -1.0)?;
        let q_eps = tape.add_scalar(&neg_p, 1.0 + LOG_EPS)?;
        let ln_q = tape.ln(&q_eps)?;
        let one_minus_y = Tensor::column(target.iter().map(|&v| 1.0 - v).collect())?;
        let t1 = tape.mul(&y, &ln_p)?;
        let t2 = tape.mul(&one_minus_y, &ln_q)?;
        let s = tape.add(&t1, &t2)?;
        Ok(tape.scale(&s, -1.0)?)
    } else {
        let diff = tape.sub(pred, &y)?;
        Ok(tape.square(&diff)?)
    }
}

fn gather_values(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

// ── Decomposition and balancing objectives ───────────────────────────

/// Adjustment decomposition loss: unweighted distribution distance of the
/// adjustment representation across arms, plus the mean prediction loss of
/// the adjustment-only outcome head over all samples.
pub fn loss_adjustment(
    tape: &mut Tape,
    rep_adjustment: &Tensor,
    y_adj_hat: &Tensor,
    y: &[f64],
    batch: &Batch,
    binary: bool,
    kernel: &KernelSpec,
) -> Result<Tensor> {
    if !batch.both_arms_nonempty() {
        return Err(Error::DegenerateInput("adjustment loss needs both treatment arms".into()));
    }
    let a0 = tape.gather_rows(rep_adjustment, &batch.arm[0])?;
    let a1 = tape.gather_rows(rep_adjustment, &batch.arm[1])?;
    let disc = mmd(tape, &a0, &a1, None, None, kernel)?;
    let lvec = prediction_loss_vec(tape, y, y_adj_hat, binary)?;
    let pred = tape.mean(&lvec)?;
    Ok(tape.add(&disc, &pred)?)
}

/// Confounder balancing loss: weighted distribution distance of the
/// confounder representation across arms, with the balancing weights as
/// mean-embedding weights per arm.
pub fn loss_balance(
    tape: &mut Tape,
    rep_confounder: &Tensor,
    omega: &Tensor,
    batch: &Batch,
    kernel: &KernelSpec,
) -> Result<Tensor> {
    if !batch.both_arms_nonempty() {
        return Err(Error::DegenerateInput("balance loss needs both treatment arms".into()));
    }
    let c0 = tape.gather_rows(rep_confounder, &batch.arm[0])?;
    let c1 = tape.gather_rows(rep_confounder, &batch.arm[1])?;
    let w0 = tape.gather_rows(omega, &batch.arm[0])?;
    let w1 = tape.gather_rows(omega, &batch.arm[1])?;
    mmd(tape, &c0, &c1, Some(&w0), Some(&w1), kernel)
}

/// Instrument decomposition loss: within each arm, the weighted distribution
/// distance of the instrument representation between outcome classes, plus
/// the mean log-loss of the treatment head over all samples. Arms with an
/// empty outcome cell contribute no distance term.
pub fn loss_instrument(
    tape: &mut Tape,
    rep_instrument: &Tensor,
    t_hat: &Tensor,
    t: &[u8],
    omega: &Tensor,
    batch: &Batch,
    kernel: &KernelSpec,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for k in 0..2 {
        let neg = &batch.cells[k][0];
        let pos = &batch.cells[k][1];
        if neg.is_empty() || pos.is_empty() {
            log::warn!(
                "instrument loss: arm {k} has an empty outcome class ({} / {} samples); skipping its distance term",
                neg.len(),
                pos.len()
            );
            continue;
        }
        let i0 = tape.gather_rows(rep_instrument, neg)?;
        let i1 = tape.gather_rows(rep_instrument, pos)?;
        let w0 = tape.gather_rows(omega, neg)?;
        let w1 = tape.gather_rows(omega, pos)?;
        let disc = mmd(tape, &i0, &i1, Some(&w0), Some(&w1), kernel)?;
        total = Some(match total {
            None => disc,
            Some(acc) => tape.add(&acc, &disc)?,
        });
    }
    let targets: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    let lvec = prediction_loss_vec(tape, &targets, t_hat, true)?;
    let pred = tape.mean(&lvec)?;
    Ok(match total {
        None => pred,
        Some(acc) => tape.add(&acc, &pred)?,
    })
}

/// Orthogonality penalty: sum of pairwise inner products of the three
/// contribution vectors. Nonnegative whenever the contributions are.
pub fn loss_orthogonal(tape: &mut Tape, contributions: &[Tensor; 3]) -> Result<Tensor> {
    let [wi, wc, wa] = contributions;
    for w in [wc, wa] {
        if w.rows() != wi.rows() || w.cols() != 1 || wi.cols() != 1 {
            return Err(Error::Contract("contribution vectors must be equal-length columns".into()));
        }
    }
    let mut dot = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
        let p = tape.mul(x, y)?;
        Ok(tape.sum(&p)?)
    };
    let ic = dot(wi, wc)?;
    let ca = dot(wc, wa)?;
    let ai = dot(wa, wi)?;
    let s = tape.add(&ic, &ca)?;
    Ok(tape.add(&s, &ai)?)
}

/// Weighted factual regression loss: every sample is scored by the outcome
/// head of its own arm and weighted by its balancing weight. This is a sum,
/// not a mean; the weights carry the normalization.
pub fn loss_regression(
    tape: &mut Tape,
    y_own: &[Tensor; 2],
    y: &[f64],
    omega: &Tensor,
    batch: &Batch,
    binary: bool,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for k in 0..2 {
        let idx = &batch.arm[k];
        if idx.is_empty() {
            continue;
        }
        if y_own[k].rows() != idx.len() {
            return Err(Error::Contract(format!(
                "regression loss: arm {k} predictions have {} rows for {} samples",
                y_own[k].rows(),
                idx.len()
            )));
        }
        let targets = gather_values(y, idx);
        let lvec = prediction_loss_vec(tape, &targets, &y_own[k], binary)?;
        let w = tape.gather_rows(omega, idx)?;
        let weighted = tape.mul(&w, &lvec)?;
        let s = tape.sum(&weighted)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(&acc, &s)?,
        });
    }
    total.ok_or_else(|| Error::DegenerateInput("regression loss: empty batch".into()))
}

/// The three regularizers: squared network weights, per-arm weight sums
/// pinned to one, and contribution sums pinned to one.
pub struct Regularizers {
    pub weights: Tensor,
    pub balance: Tensor,
    pub orthogonal: Tensor,
}

pub fn regularizers(
    tape: &mut Tape,
    bound: &BoundModel,
    omega: &Tensor,
    contributions: &[Tensor; 3],
    batch: &Batch,
) -> Result<Regularizers> {
    // R_W: sum of squared entries of every weight matrix (not biases, not
    // batch-norm parameters).
    let mut r_w: Option<Tensor> = None;
    for w in bound.weight_tensors() {
        let sq = tape.square(w)?;
        let s = tape.sum(&sq)?;
        r_w = Some(match r_w {
            None => s,
            Some(acc) => tape.add(&acc, &s)?,
        });
    }
    let weights = r_w.expect("model always has weight matrices");

    // R_C_B: (sum_{t=0} w - 1)^2 + (sum_{t=1} w - 1)^2.
    let mut arm_penalty = |idx: &[usize]| -> Result<Tensor> {
        let w = tape.gather_rows(omega, idx)?;
        let s = tape.sum(&w)?;
        let c = tape.add_scalar(&s, -1.0)?;
        Ok(tape.square(&c)?)
    };
    let p0 = arm_penalty(&batch.arm[0])?;
    let p1 = arm_penalty(&batch.arm[1])?;
    let balance = tape.add(&p0, &p1)?;

    // R_O: sum over factors of (sum_k contribution_k - 1)^2.
    let mut r_o: Option<Tensor> = None;
    for w in contributions {
        let s = tape.sum(w)?;
        let c = tape.add_scalar(&s, -1.0)?;
        let sq = tape.square(&c)?;
        r_o = Some(match r_o {
            None => sq,
            Some(acc) => tape.add(&acc, &sq)?,
        });
    }
    let orthogonal = r_o.expect("three contribution vectors");

    Ok(Regularizers {
        weights,
        balance,
        orthogonal,
    })
}

// ── Assembly ─────────────────────────────────────────────────────────

/// Coefficients of the composite objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub lambda: f64,
}

/// Raw values of every objective term on one batch, plus the composite
/// totals. Terms whose coefficient is zero are not evaluated and report zero.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub regression: f64,
    pub adjustment: f64,
    pub instrument: f64,
    pub balance: f64,
    pub orthogonal: f64,
    pub reg_weights: f64,
    pub reg_balance: f64,
    pub reg_orthogonal: f64,
    /// Full objective.
    pub total: f64,
    /// Network-phase objective (balance term excluded).
    pub phase_network: f64,
    /// Weight-phase objective (regression, balance and regularizers only).
    pub phase_weight: f64,
}

impl LossReport {
    /// Names for tabular output, aligned with [`LossReport::fields`].
    pub fn field_names() -> [&'static str; 11] {
        [
            "regression",
            "adjustment",
            "instrument",
            "balance",
            "orthogonal",
            "reg_weights",
            "reg_balance",
            "reg_orthogonal",
            "total",
            "phase_network",
            "phase_weight",
        ]
    }

    pub fn fields(&self) -> [f64; 11] {
        [
            self.regression,
            self.adjustment,
            self.instrument,
            self.balance,
            self.orthogonal,
            self.reg_weights,
            self.reg_balance,
            self.reg_orthogonal,
            self.total,
            self.phase_network,
            self.phase_weight,
        ]
    }

    /// Recompute the composite totals from the stored parts.
    pub fn recompute_total(&self, c: &Coefficients) -> f64 {
        self.regression
            + c.alpha * self.adjustment
            + c.beta * self.instrument
            + c.gamma * self.balance
            + c.mu * self.orthogonal
            + c.lambda * (self.reg_weights + self.reg_balance + self.reg_orthogonal)
    }

    /// First non-finite field, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::field_names()
            .iter()
            .zip(self.fields())
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| *name)
    }
}

/// The assembled objective: scalar tensors for the full loss and the two
/// alternating phases, sharing subgraphs on the same tape.
pub struct AssembledLosses {
    pub report: LossReport,
    pub total: Tensor,
    pub phase_network: Tensor,
    pub phase_weight: Tensor,
}

/// Build every active term of the objective on the tape and combine them.
#[allow(clippy::too_many_arguments)]
pub fn build_losses(
    tape: &mut Tape,
    bound: &BoundModel,
    fwd: &TrainForward,
    omega: &Tensor,
    y: &[f64],
    t: &[u8],
    batch: &Batch,
    binary: bool,
    coeffs: &Coefficients,
    kernel: &KernelSpec,
    layer_count: LayerCount,
) -> Result<AssembledLosses> {
    let l_r = loss_regression(tape, &fwd.y_own, y, omega, batch, binary)?;

    let l_a = if coeffs.alpha != 0.0 {
        Some(loss_adjustment(tape, &fwd.rep_adjustment, &fwd.y_adj_hat, y, batch, binary, kernel)?)
    } else {
        None
    };
    let l_i = if coeffs.beta != 0.0 {
        Some(loss_instrument(tape, &fwd.rep_instrument, &fwd.t_hat, t, omega, batch, kernel)?)
    } else {
        None
    };
    let l_cb = if coeffs.gamma != 0.0 {
        Some(loss_balance(tape, &fwd.rep_confounder, omega, batch, kernel)?)
    } else {
        None
    };

    let need_contributions = coeffs.mu != 0.0 || coeffs.lambda != 0.0;
    let contributions = if need_contributions {
        Some(bound.contributions(tape, layer_count)?)
    } else {
        None
    };
    let l_o = match (&contributions, coeffs.mu != 0.0) {
        (Some(c), true) => Some(loss_orthogonal(tape, c)?),
        _ => None,
    };
    let reg = match (&contributions, coeffs.lambda != 0.0) {
        (Some(c), true) => Some(regularizers(tape, bound, omega, c, batch)?),
        _ => None,
    };

    let reg_sum = match &reg {
        None => None,
        Some(r) => {
            let s = tape.add(&r.weights, &r.balance)?;
            Some(tape.add(&s, &r.orthogonal)?)
        }
    };

    let add_scaled = |tape: &mut Tape, acc: &Tensor, term: Option<&Tensor>, coeff: f64| -> Result<Tensor> {
        match term {
            Some(t) if coeff != 0.0 => {
                let scaled = tape.scale(t, coeff)?;
                Ok(tape.add(acc, &scaled)?)
            }
            _ => Ok(acc.clone()),
        }
    };

    let mut total = l_r.clone();
    total = add_scaled(tape, &total, l_a.as_ref(), coeffs.alpha)?;
    total = add_scaled(tape, &total, l_i.as_ref(), coeffs.beta)?;
    total = add_scaled(tape, &total, l_cb.as_ref(), coeffs.gamma)?;
    total = add_scaled(tape, &total, l_o.as_ref(), coeffs.mu)?;
    total = add_scaled(tape, &total, reg_sum.as_ref(), coeffs.lambda)?;

    let mut phase_network = l_r.clone();
    phase_network = add_scaled(tape, &phase_network, l_a.as_ref(), coeffs.alpha)?;
    phase_network = add_scaled(tape, &phase_network, l_i.as_ref(), coeffs.beta)?;
    phase_network = add_scaled(tape, &phase_network, l_o.as_ref(), coeffs.mu)?;
    phase_network = add_scaled(tape, &phase_network, reg_sum.as_ref(), coeffs.lambda)?;

    let mut phase_weight = l_r.clone();
    phase_weight = add_scaled(tape, &phase_weight, l_cb.as_ref(), coeffs.gamma)?;
    phase_weight = add_scaled(tape, &phase_weight, reg_sum.as_ref(), coeffs.lambda)?;

    let report = LossReport {
        regression: l_r.item(),
        adjustment: l_a.as_ref().map_or(0.0, Tensor::item),
        instrument: l_i.as_ref().map_or(0.0, Tensor::item),
        balance: l_cb.as_ref().map_or(0.0, Tensor::item),
        orthogonal: l_o.as_ref().map_or(0.0, Tensor::item),
        reg_weights: reg.as_ref().map_or(0.0, |r| r.weights.item()),
        reg_balance: reg.as_ref().map_or(0.0, |r| r.balance.item()),
        reg_orthogonal: reg.as_ref().map_or(0.0, |r| r.orthogonal.item()),
        total: total.item(),
        phase_network: phase_network.item(),
        phase_weight: phase_weight.item(),
    };

    Ok(AssembledLosses {
        report,
        total,
        phase_network,
        phase_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::constant(rows, cols, v).unwrap()
    }

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn mmd_zero_on_identical_sets() {
        let mut tape = Tape::new();
        let a = tensor(3, 2, vec![0.5, 1.0, -1.0, 2.0, 0.0, 0.3]);
        for kernel in [KernelSpec::Linear, KernelSpec::rbf(1.0)] {
            let v = mmd(&mut tape, &a, &a, None, None, &kernel).unwrap().item();
            assert!(v.abs() < 1e-12, "{kernel:?} gave {v}");
        }
    }

    #[test]
    fn mmd_weighted_means_coincide() {
        let mut tape = Tape::new();
        let a = tensor(2, 1, vec![0.0, 2.0]);
        let b = tensor(1, 1, vec![1.0]);
        let wa = tensor(2, 1, vec![0.5, 0.5]);
        let wb = tensor(1, 1, vec![1.0]);
        let v = mmd(&mut tape, &a, &b, Some(&wa), Some(&wb), &KernelSpec::Linear)
            .unwrap()
            .item();
        assert!(v.abs() < 1e-15, "got {v}");
    }

    #[test]
    fn mmd_rbf_single_points_closed_form() {
        let mut tape = Tape::new();
        let a = tensor(1, 1, vec![0.0]);
        let b = tensor(1, 1, vec![1.0]);
        let v = mmd(&mut tape, &a, &b, None, None, &KernelSpec::rbf(1.0)).unwrap().item();
        let expect = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((v - expect).abs() < 1e-12, "got {v}, expected {expect}");
        assert!((v - 0.78694).abs() < 1e-5);
    }

    #[test]
    fn mmd_symmetry_and_nonnegativity() {
        let mut tape = Tape::new();
        let a = tensor(3, 2, vec![0.1, -0.2, 1.4, 0.7, -2.0, 0.05]);
        let b = tensor(2, 2, vec![0.9, 0.9, -0.4, 1.1]);
        for kernel in [KernelSpec::Linear, KernelSpec::rbf(0.7)] {
            let ab = mmd(&mut tape, &a, &b, None, None, &kernel).unwrap().item();
            let ba = mmd(&mut tape, &b, &a, None, None, &kernel).unwrap().item();
            assert!((ab - ba).abs() < 1e-14);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn mmd_rejects_degenerate_groups() {
        let mut tape = Tape::new();
        let a = tensor(2, 1, vec![0.0, 1.0]);
        let empty = tensor(0, 1, vec![]);
        assert!(matches!(
            mmd(&mut tape, &a, &empty, None, None, &KernelSpec::Linear),
            Err(Error::DegenerateInput(_))
        ));
        let wz = tensor(2, 1, vec![0.0, 0.0]);
        assert!(matches!(
            mmd(&mut tape, &a, &a, Some(&wz), None, &KernelSpec::Linear),
            Err(Error::DegenerateInput(_))
        ));
        let wneg = tensor(2, 1, vec![-1.0, 2.0]);
        assert!(mmd(&mut tape, &a, &a, Some(&wneg), None, &KernelSpec::Linear).is_err());
    }

    #[test]
    fn mmd_median_heuristic_runs() {
        let mut tape = Tape::new();
        let a = tensor(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = tensor(2, 2, vec![2.0, 2.0, 3.0, 3.0]);
        let kernel = KernelSpec::Rbf {
            bandwidth: Bandwidth::MedianHeuristic,
        };
        let v = mmd(&mut tape, &a, &b, None, None, &kernel).unwrap().item();
        assert!(v > 0.0 && v.is_finite());
    }

    #[test]
    fn binarize_by_median_cases() {
        // Even-sized arm: median of (1,2,3,4) is 2.5.
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let t = vec![0, 0, 0, 0, 1];
        let mut y5 = y.clone();
        y5.push(7.0);
        let b = binarize_by_median(&y5, &t).unwrap();
        assert_eq!(&b[..4], &[0.0, 0.0, 1.0, 1.0]);

        // Constant arm: everything sits at the median and maps to 1.
        let b = binarize_by_median(&[5.0, 5.0, 5.0, 0.0], &[0, 0, 0, 1]).unwrap();
        assert_eq!(&b[..3], &[1.0, 1.0, 1.0]);

        // Arms binarize independently.
        let b = binarize_by_median(&[0.0, 10.0, 100.0, 200.0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(b, vec![0.0, 1.0, 0.0, 1.0]);

        assert!(binarize_by_median(&[1.0, 2.0], &[0, 0]).is_err());
    }

    #[test]
    fn batch_buckets_cells() {
        let t = vec![0, 0, 1, 1, 0];
        let y = vec![0.0, 1.0, 1.0, 0.0, 1.0];
        let batch = Batch::new(&t, &y).unwrap();
        assert_eq!(batch.arm[0], vec![0, 1, 4]);
        assert_eq!(batch.arm[1], vec![2, 3]);
        assert_eq!(batch.cells[0][0], vec![0]);
        assert_eq!(batch.cells[0][1], vec![1, 4]);
        assert_eq!(batch.cells[1][1], vec![2]);
        assert!(Batch::new(&t, &[0.5, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn adjustment_loss_cases() {
        let t = vec![0u8, 0, 1, 1];
        let batch = Batch::new(&t, &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();

        // Constant representation and perfect continuous predictions.
        let rep = tensor(4, 2, vec![0.7, -0.1].repeat(4));
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let pred = tensor(4, 1, y.clone());
        let v = loss_adjustment(&mut tape, &rep, &pred, &y, &batch, false, &KernelSpec::Linear)
            .unwrap()
            .item();
        assert!(v.abs() < 1e-15, "got {v}");

        // The distance part alone equals the mmd of the gathered groups.
        let rep = tensor(4, 2, vec![0.1, 0.2, -0.5, 0.9, 1.5, -1.0, 0.3, 0.3]);
        let zero_err_pred = tensor(4, 1, y.clone());
        let total = loss_adjustment(&mut tape, &rep, &zero_err_pred, &y, &batch, false, &KernelSpec::Linear)
            .unwrap()
            .item();
        let g0 = tape.gather_rows(&rep, &batch.arm[0]).unwrap();
        let g1 = tape.gather_rows(&rep, &batch.arm[1]).unwrap();
        let disc = mmd(&mut tape, &g0, &g1, None, None, &KernelSpec::Linear).unwrap().item();
        assert!((total - disc).abs() < 1e-14);

        // Uninformative binary predictor on a balanced representation.
        let rep = tensor(4, 1, vec![1.0, 2.0, 1.0, 2.0]);
        let yb = vec![0.0, 1.0, 1.0, 0.0];
        let half = tensor(4, 1, vec![0.5; 4]);
        let v = loss_adjustment(&mut tape, &rep, &half, &yb, &batch, true, &KernelSpec::Linear)
            .unwrap()
            .item();
        assert!((v - LN2).abs() < 1e-9, "got {v}, expected ln 2");
    }

    #[test]
    fn balance_loss_cases() {
        let mut tape = Tape::new();

        // Identically distributed confounder representations.
        let t = vec![0u8, 0, 1, 1];
        let batch = Batch::new(&t, &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let rep = tensor(4, 1, vec![1.0, 2.0, 1.0, 2.0]);
        let omega = tensor(4, 1, vec![0.25; 4]);
        let v = loss_balance(&mut tape, &rep, &omega, &batch, &KernelSpec::Linear).unwrap().item();
        assert!(v.abs() < 1e-15);

        // Weighted means coincide: {0, 2} at (.5,.5) vs {1}.
        let t = vec![0u8, 0, 1];
        let batch = Batch::new(&t, &[0.0, 1.0, 1.0]).unwrap();
        let rep = tensor(3, 1, vec![0.0, 2.0, 1.0]);
        let omega = tensor(3, 1, vec![0.5, 0.5, 1.0]);
        let v = loss_balance(&mut tape, &rep, &omega, &batch, &KernelSpec::Linear).unwrap().item();
        assert!(v.abs() < 1e-15);

        // Normalized single points at distance one.
        let t = vec![0u8, 1];
        let batch = Batch::new(&t, &[1.0, 1.0]).unwrap();
        let rep = tensor(2, 1, vec![0.0, 1.0]);
        let omega = tensor(2, 1, vec![3.7, 0.2]);
        let v = loss_balance(&mut tape, &rep, &omega, &batch, &KernelSpec::Linear).unwrap().item();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn balance_loss_invariant_to_arm_rescaling() {
        let mut tape = Tape::new();
        let t = vec![0u8, 0, 1, 1, 0];
        let batch = Batch::new(&t, &[0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let rep = tensor(5, 2, vec![0.3, 1.0, -0.5, 0.2, 0.9, 0.9, 1.5, -0.3, 0.0, 0.4]);
        let omega = tensor(5, 1, vec![0.2, 0.5, 0.9, 0.1, 0.3]);
        let scaled = tensor(5, 1, vec![0.2 * 7.0, 0.5 * 7.0, 0.9, 0.1, 0.3 * 7.0]);
        for kernel in [KernelSpec::Linear, KernelSpec::rbf(0.8)] {
            let v1 = loss_balance(&mut tape, &rep, &omega, &batch, &kernel).unwrap().item();
            let v2 = loss_balance(&mut tape, &rep, &scaled, &batch, &kernel).unwrap().item();
            assert!((v1 - v2).abs() < 1e-12, "{kernel:?}: {v1} vs {v2}");
        }
    }

    #[test]
    fn instrument_loss_cases() {
        let mut tape = Tape::new();

        // Identical representation within each arm and a perfect treatment head.
        let t = vec![0u8, 0, 1, 1];
        let batch = Batch::new(&t, &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let rep = tensor(4, 2, vec![0.4, 0.1, 0.4, 0.1, -0.9, 0.2, -0.9, 0.2]);
        // Perfect prediction hits the log-loss epsilon floor, not exactly 0.
        let t_hat = tensor(4, 1, vec![1e-15, 1e-15, 1.0 - 1e-15, 1.0 - 1e-15]);
        let omega = tensor(4, 1, vec![0.5; 4]);
        let v = loss_instrument(&mut tape, &rep, &t_hat, &t, &omega, &batch, &KernelSpec::Linear)
            .unwrap()
            .item();
        assert!(v.abs() < 1e-9, "got {v}");

        // Uninformative treatment head, no distance terms (single-class arms).
        let batch1 = Batch::new(&t, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let half = tensor(4, 1, vec![0.5; 4]);
        let v = loss_instrument(&mut tape, &rep, &half, &t, &omega, &batch1, &KernelSpec::Linear)
            .unwrap()
            .item();
        assert!((v - LN2).abs() < 1e-9);

        // Arm 0 contributes a unit distance; arm 1 is skipped (one class).
        let t = vec![0u8, 0, 1, 1];
        let batch2 = Batch::new(&t, &[0.0, 1.0, 1.0, 1.0]).unwrap();
        let rep = tensor(4, 1, vec![0.0, 1.0, 0.3, 0.3]);
        let v = loss_instrument(&mut tape, &rep, &half, &t, &omega, &batch2, &KernelSpec::Linear)
            .unwrap()
            .item();
        assert!((v - (1.0 + LN2)).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn orthogonal_loss_cases() {
        let mut tape = Tape::new();
        let e1 = tensor(3, 1, vec![1.0, 0.0, 0.0]);
        let e2 = tensor(3, 1, vec![0.0, 1.0, 0.0]);
        let e3 = tensor(3, 1, vec![0.0, 0.0, 1.0]);
        let v = loss_orthogonal(&mut tape, &[e1, e2, e3]).unwrap().item();
        assert_eq!(v, 0.0);

        let q = tensor(4, 1, vec![0.25; 4]);
        let v = loss_orthogonal(&mut tape, &[q.clone(), q.clone(), q]).unwrap().item();
        assert!((v - 0.75).abs() < 1e-15);

        let a = tensor(2, 1, vec![1.0, 0.0]);
        let b = tensor(2, 1, vec![1.0, 0.0]);
        let c = tensor(2, 1, vec![0.0, 1.0]);
        let v = loss_orthogonal(&mut tape, &[a, b, c]).unwrap().item();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn regression_loss_cases() {
        let mut tape = Tape::new();
        let t = vec![0u8, 0, 1];
        let batch = Batch::new(&t, &[0.0, 1.0, 1.0]).unwrap();
        let y = vec![1.5, -0.5, 2.0];

        // Perfect predictions.
        let own0 = tensor(2, 1, vec![1.5, -0.5]);
        let own1 = tensor(1, 1, vec![2.0]);
        let omega = tensor(3, 1, vec![0.4, 0.6, 1.0]);
        let v = loss_regression(&mut tape, &[own0, own1], &y, &omega, &batch, false)
            .unwrap()
            .item();
        assert_eq!(v, 0.0);

        // Linearity in the weights.
        let own0 = tensor(2, 1, vec![1.0, 0.0]);
        let own1 = tensor(1, 1, vec![1.0]);
        let v1 = loss_regression(&mut tape, &[own0.clone(), own1.clone()], &y, &omega, &batch, false)
            .unwrap()
            .item();
        let doubled = tensor(3, 1, vec![0.8, 1.2, 2.0]);
        let v2 = loss_regression(&mut tape, &[own0, own1], &y, &doubled, &batch, false)
            .unwrap()
            .item();
        assert!((v2 - 2.0 * v1).abs() < 1e-12);

        // Single sample, unit weight, squared error 4.
        let t = vec![1u8, 0];
        let batch = Batch::new(&t, &[1.0, 1.0]).unwrap();
        let y = vec![2.0, 0.0];
        let own0 = tensor(1, 1, vec![0.0]);
        let own1 = tensor(1, 1, vec![0.0]);
        let omega = tensor(2, 1, vec![1.0, 0.0]);
        let v = loss_regression(&mut tape, &[own0, own1], &y, &omega, &batch, false)
            .unwrap()
            .item();
        assert_eq!(v, 4.0);
    }

    #[test]
    fn regularizer_cases() {
        use crate::model::{build_model, BoundModel, ModelConfig};
        let cfg = ModelConfig {
            input_dim: 3,
            rep_dim: 2,
            rep_depth: 1,
            rep_width: 2,
            out_depth: 1,
            out_width: 2,
            treat_depth: 1,
            treat_width: 2,
            batch_norm: false,
            rep_normalize: false,
            binary_outcome: true,
        };
        let t = vec![0u8, 0, 1, 1];
        let model = build_model(&cfg, &t, 5).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model, false).unwrap();
        let batch = Batch::new(&t, &[0.0, 1.0, 0.0, 1.0]).unwrap();

        // Per-arm weight sums of exactly one.
        let omega = tensor(4, 1, vec![0.5, 0.5, 0.25, 0.75]);
        let unit = tensor(2, 1, vec![0.5, 0.5]);
        let contributions = [unit.clone(), unit.clone(), unit.clone()];
        let r = regularizers(&mut tape, &bound, &omega, &contributions, &batch).unwrap();
        assert!(r.balance.item().abs() < 1e-15);
        assert!(r.orthogonal.item().abs() < 1e-15);
        assert!(r.weights.item() > 0.0);

        // All-zero weights (hypothetical): each arm misses its target by one.
        let omega0 = tensor(4, 1, vec![0.0; 4]);
        let r = regularizers(&mut tape, &bound, &omega0, &contributions, &batch).unwrap();
        assert_eq!(r.balance.item(), 2.0);

        // Contribution sums away from one.
        let off = tensor(2, 1, vec![1.0, 1.0]);
        let r = regularizers(&mut tape, &bound, &omega, &[off.clone(), off.clone(), off], &batch).unwrap();
        assert_eq!(r.orthogonal.item(), 3.0);
    }

    #[test]
    fn head_separation_gradients() {
        use crate::model::{build_model, BoundModel, ModelConfig};
        let cfg = ModelConfig {
            input_dim: 4,
            rep_dim: 3,
            rep_depth: 1,
            rep_width: 3,
            out_depth: 1,
            out_width: 3,
            treat_depth: 1,
            treat_width: 3,
            batch_norm: false,
            rep_normalize: false,
            binary_outcome: true,
        };
        let t = vec![0u8, 0, 1, 1];
        let model = build_model(&cfg, &t, 5).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model, true).unwrap();
        let x = tensor(4, 4, (0..16).map(|i| (i as f64) * 0.1 - 0.8).collect());
        let batch = Batch::new(&t, &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let fwd = bound.forward_training(&mut tape, &x, &batch.arm[0], &batch.arm[1]).unwrap();
        let omega = bound.omega(&mut tape).unwrap();

        // A loss containing only arm 0 must not reach the arm-1 head.
        let y = vec![0.0, 1.0, 1.0, 0.0];
        let targets = gather_values(&y, &batch.arm[0]);
        let lvec = prediction_loss_vec(&mut tape, &targets, &fwd.y_own[0], true).unwrap();
        let w0 = tape.gather_rows(&omega, &batch.arm[0]).unwrap();
        let weighted = tape.mul(&w0, &lvec).unwrap();
        let loss = tape.sum(&weighted).unwrap();
        let grads = tape.backward(&loss).unwrap();

        for layer in &bound.outcome_head1.layers {
            assert!(grads.get(&layer.w).is_none());
            assert_eq!(grads.dense(&layer.w), vec![0.0; layer.w.len()]);
        }
        let touched = bound
            .outcome_head0
            .layers
            .iter()
            .any(|l| grads.get(&l.w).is_some_and(|g| g.iter().any(|&v| v != 0.0)));
        assert!(touched, "arm-0 head should receive gradient");
    }

    #[test]
    fn assembled_report_is_self_consistent() {
        use crate::model::{build_model, BoundModel, ModelConfig};
        let cfg = ModelConfig {
            input_dim: 5,
            rep_dim: 3,
            rep_depth: 2,
            rep_width: 4,
            out_depth: 1,
            out_width: 4,
            treat_depth: 1,
            treat_width: 3,
            batch_norm: true,
            rep_normalize: false,
            binary_outcome: true,
        };
        let t = vec![0u8, 0, 0, 1, 1, 1];
        let y = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let model = build_model(&cfg, &t, 3).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model, true).unwrap();
        let x = tensor(6, 5, (0..30).map(|i| ((i * 7 % 13) as f64) * 0.2 - 1.0).collect());
        let batch = Batch::new(&t, &y).unwrap();
        let fwd = bound.forward_training(&mut tape, &x, &batch.arm[0], &batch.arm[1]).unwrap();
        let omega = bound.omega(&mut tape).unwrap();

        let coeffs = Coefficients {
            alpha: 0.3,
            beta: 2.0,
            gamma: 1.0,
            mu: 5.0,
            lambda: 0.01,
        };
        let out = build_losses(
            &mut tape,
            &bound,
            &fwd,
            &omega,
            &y,
            &t,
            &batch,
            true,
            &coeffs,
            &KernelSpec::Linear,
            LayerCount::All,
        )
        .unwrap();

        let r = &out.report;
        assert!((r.total - r.recompute_total(&coeffs)).abs() <= 1e-12);
        let expect_network = r.regression
            + coeffs.alpha * r.adjustment
            + coeffs.beta * r.instrument
            + coeffs.mu * r.orthogonal
            + coeffs.lambda * (r.reg_weights + r.reg_balance + r.reg_orthogonal);
        assert!((r.phase_network - expect_network).abs() <= 1e-12);
        let expect_weight =
            r.regression + coeffs.gamma * r.balance + coeffs.lambda * (r.reg_weights + r.reg_balance + r.reg_orthogonal);
        assert!((r.phase_weight - expect_weight).abs() <= 1e-12);
        assert!(r.non_finite_term().is_none());

        // Zeroed composite coefficients leave only regression plus regularizers.
        let sparse = Coefficients {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            mu: 0.0,
            lambda: 0.01,
        };
        let out = build_losses(
            &mut tape,
            &bound,
            &fwd,
            &omega,
            &y,
            &t,
            &batch,
            true,
            &sparse,
            &KernelSpec::Linear,
            LayerCount::All,
        )
        .unwrap();
        let r = &out.report;
        assert_eq!(r.adjustment, 0.0);
        assert_eq!(r.instrument, 0.0);
        let expect = r.regression + 0.01 * (r.reg_weights + r.reg_balance + r.reg_orthogonal);
        assert!((r.total - expect).abs() <= 1e-12);
    }

    #[test]
    fn all_zero_terms_give_zero_report() {
        // With zero coefficients everywhere and a zero-regression setup the
        // whole report is zero.
        use crate::model::{build_model, BoundModel, ModelConfig};
        let cfg = ModelConfig {
            input_dim: 2,
            rep_dim: 2,
            rep_depth: 1,
            rep_width: 2,
            out_depth: 1,
            out_width: 2,
            treat_depth: 1,
            treat_width: 2,
            batch_norm: false,
            rep_normalize: false,
            binary_outcome: false,
        };
        let t = vec![0u8, 1];
        let mut model = build_model(&cfg, &t, 1).unwrap();
        for p in model.network_params_mut() {
            p.fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model, false).unwrap();
        let x = tensor(2, 2, vec![0.0; 4]);
        let batch = Batch::new(&t, &[1.0, 1.0]).unwrap();
        let fwd = bound.forward_training(&mut tape, &x, &batch.arm[0], &batch.arm[1]).unwrap();
        let omega = tensor(2, 1, vec![1.0, 1.0]);
        let y = vec![0.0, 0.0];
        let coeffs = Coefficients {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            mu: 0.0,
            lambda: 0.0,
        };
        let out = build_losses(
            &mut tape,
            &bound,
            &fwd,
            &omega,
            &y,
            &t,
            &batch,
            false,
            &coeffs,
            &KernelSpec::Linear,
            LayerCount::All,
        )
        .unwrap();
        for v in out.report.fields() {
            assert_eq!(v, 0.0);
        }
    }
}
