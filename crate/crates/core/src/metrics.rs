//! Treatment-effect error metrics and identification diagnostics.

use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor};
use crate::data::{Dataset, VarRole};
use crate::error::{Error, Result};
use crate::model::{BnMode, BoundModel, ContributionProfile, DeRCFRModel};

/// Which units a report was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "within-sample")]
    WithinSample,
    #[serde(rename = "out-of-sample")]
    OutOfSample,
}

/// Error metrics over one evaluation scope. Fields are present when the
/// dataset carries the inputs they need (ground-truth potential outcomes for
/// the effect errors, a randomized-subsample flag for the policy metrics).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub scope: Scope,
    pub pehe: Option<f64>,
    pub ate_error: Option<f64>,
    pub policy_risk: Option<f64>,
    pub att_error: Option<f64>,
}

fn check_equal_len(op: &str, lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Contract(format!("{op}: input length mismatch {lens:?}")));
    }
    if lens[0] == 0 {
        return Err(Error::Contract(format!("{op}: empty inputs")));
    }
    Ok(())
}

/// Root-mean-square error of the predicted individual effect.
pub fn pehe(yhat1: &[f64], yhat0: &[f64], y1: &[f64], y0: &[f64]) -> Result<f64> {
    check_equal_len("pehe", &[yhat1.len(), yhat0.len(), y1.len(), y0.len()])?;
    let n = y1.len() as f64;
    let sum: f64 = (0..y1.len())
        .map(|i| {
            let d = (yhat1[i] - yhat0[i]) - (y1[i] - y0[i]);
            d * d
        })
        .sum();
    Ok((sum / n).sqrt())
}

/// Absolute bias of the average treatment effect.
pub fn ate_error(yhat1: &[f64], yhat0: &[f64], y1: &[f64], y0: &[f64]) -> Result<f64> {
    check_equal_len("ate_error", &[yhat1.len(), yhat0.len(), y1.len(), y0.len()])?;
    let n = y1.len() as f64;
    let true_ate: f64 = y1.iter().zip(y0).map(|(a, b)| a - b).sum::<f64>() / n;
    let est_ate: f64 = yhat1.iter().zip(yhat0).map(|(a, b)| a - b).sum::<f64>() / n;
    Ok((true_ate - est_ate).abs())
}

/// Expected loss of treating by the sign of the predicted effect, estimated
/// on the randomized subsample. The policy treats exactly when the predicted
/// effect is strictly positive; an empty conditional cell contributes zero.
pub fn policy_risk(yhat1: &[f64], yhat0: &[f64], y_f: &[f64], t: &[u8], rct: &[bool]) -> Result<f64> {
    check_equal_len(
        "policy_risk",
        &[yhat1.len(), yhat0.len(), y_f.len(), t.len(), rct.len()],
    )?;
    let idx: Vec<usize> = (0..t.len()).filter(|&i| rct[i]).collect();
    if idx.is_empty() {
        return Err(Error::DegenerateInput("policy_risk: empty randomized subsample".into()));
    }
    let n = idx.len() as f64;
    let pi: Vec<bool> = idx.iter().map(|&i| yhat1[i] - yhat0[i] > 0.0).collect();
    let p_treat = pi.iter().filter(|&&p| p).count() as f64 / n;

    let mean_over = |want_pi: bool, want_t: u8| -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (&i, &p) in idx.iter().zip(&pi) {
            if p == want_pi && t[i] == want_t {
                sum += y_f[i];
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };

    let value = mean_over(true, 1) * p_treat + mean_over(false, 0) * (1.0 - p_treat);
    Ok(1.0 - value)
}

/// Absolute error of the average effect on the treated: the ground truth is
/// the treated factual mean minus the randomized-control factual mean, the
/// estimate the mean predicted effect over treated units.
pub fn att_error(yhat1: &[f64], yhat0: &[f64], y_f: &[f64], t: &[u8], rct: &[bool]) -> Result<f64> {
    check_equal_len(
        "att_error",
        &[yhat1.len(), yhat0.len(), y_f.len(), t.len(), rct.len()],
    )?;
    let treated: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 1).collect();
    let rct_control: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 0 && rct[i]).collect();
    if treated.is_empty() || rct_control.is_empty() {
        return Err(Error::DegenerateInput(
            "att_error: needs treated units and randomized controls".into(),
        ));
    }
    let mean = |idx: &[usize], v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
    let true_att = mean(&treated, y_f) - mean(&rct_control, y_f);
    let est_att = treated
        .iter()
        .map(|&i| yhat1[i] - yhat0[i])
        .sum::<f64>()
        / treated.len() as f64;
    Ok((true_att - est_att).abs())
}

// ── Identification diagnostics ───────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct VariableContribution {
    /// 1-based variable index.
    pub variable: usize,
    pub role: Option<VarRole>,
    pub w_instrument: f64,
    pub w_confounder: f64,
    pub w_adjustment: f64,
}

/// Mean contribution mass on one representation, split into the variables
/// that truly belong to the factor and all others. `ratio` is infinite when
/// the others carry no mass at all.
#[derive(Debug, Clone, Serialize)]
pub struct FactorSummary {
    pub factor: VarRole,
    pub true_mean: f64,
    pub other_mean: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentificationReport {
    pub rows: Vec<VariableContribution>,
    /// Present when ground-truth roles are known.
    pub summary: Option<[FactorSummary; 3]>,
}

fn factor_summary(weights: &[f64], roles: &[VarRole], factor: VarRole) -> FactorSummary {
    let mut true_sum = 0.0;
    let mut true_n = 0usize;
    let mut other_sum = 0.0;
    let mut other_n = 0usize;
    for (&w, &r) in weights.iter().zip(roles) {
        if r == factor {
            true_sum += w;
            true_n += 1;
        } else {
            other_sum += w;
            other_n += 1;
        }
    }
    let true_mean = if true_n == 0 { 0.0 } else { true_sum / true_n as f64 };
    let other_mean = if other_n == 0 { 0.0 } else { other_sum / other_n as f64 };
    let ratio = if other_mean > 0.0 {
        true_mean / other_mean
    } else if true_mean > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    FactorSummary {
        factor,
        true_mean,
        other_mean,
        ratio,
    }
}

/// Per-variable contribution table plus, when roles are known, the per-factor
/// concentration summary.
pub fn identification_report(profile: &ContributionProfile, roles: Option<&[VarRole]>) -> IdentificationReport {
    let m = profile.w_instrument.len();
    let rows = (0..m)
        .map(|j| VariableContribution {
            variable: j + 1,
            role: roles.map(|r| r[j]),
            w_instrument: profile.w_instrument[j],
            w_confounder: profile.w_confounder[j],
            w_adjustment: profile.w_adjustment[j],
        })
        .collect();
    let summary = roles.filter(|r| r.len() == m).map(|roles| {
        [
            factor_summary(&profile.w_instrument, roles, VarRole::Instrument),
            factor_summary(&profile.w_confounder, roles, VarRole::Confounder),
            factor_summary(&profile.w_adjustment, roles, VarRole::Adjustment),
        ]
    });
    IdentificationReport { rows, summary }
}

// ── Model evaluation ─────────────────────────────────────────────────

/// Predicted potential outcomes for every row of a dataset, using frozen
/// normalization statistics.
pub fn predict_potential_outcomes(model: &DeRCFRModel, ds: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let input_dim = model.rep_instrument.spec.input_dim;
    if ds.m() != input_dim {
        return Err(Error::Contract(format!(
            "model expects {input_dim} covariates, dataset has {}",
            ds.m()
        )));
    }
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model, false)?;
    let x = Tensor::constant(ds.n(), ds.m(), ds.x().to_vec())?;
    let fwd = bound.forward_all(&mut tape, &x, BnMode::Eval)?;
    Ok((fwd.y0_hat.values().to_vec(), fwd.y1_hat.values().to_vec()))
}

/// Every available error metric of a model on one dataset scope.
pub fn evaluate(model: &DeRCFRModel, ds: &Dataset, scope: Scope) -> Result<EvalReport> {
    let (yhat0, yhat1) = predict_potential_outcomes(model, ds)?;
    let mut report = EvalReport {
        scope,
        pehe: None,
        ate_error: None,
        policy_risk: None,
        att_error: None,
    };
    if let (Some(y0), Some(y1)) = (&ds.y0, &ds.y1) {
        report.pehe = Some(pehe(&yhat1, &yhat0, y1, y0)?);
        report.ate_error = Some(ate_error(&yhat1, &yhat0, y1, y0)?);
    }
    if let Some(rct) = &ds.rct {
        if rct.iter().any(|&f| f) {
            report.policy_risk = Some(policy_risk(&yhat1, &yhat0, &ds.y_f, &ds.t, rct)?);
            report.att_error = Some(att_error(&yhat1, &yhat0, &ds.y_f, &ds.t, rct)?);
        }
    }
    Ok(report)
}
