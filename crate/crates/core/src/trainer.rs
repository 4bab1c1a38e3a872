//! Alternating full-batch training, hyperparameter search over the declared
//! grid, and the single-term ablation harness.
//!
//! Each iteration runs one forward pass over the whole training set, then
//! takes one Adam step on the network parameters against the network-phase
//! objective (balancing weights frozen) and one Adam step on the weight
//! pre-parameters against the weight-phase objective (networks frozen). The
//! two phases keep separate optimizer states.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{AdamState, Tape, Tensor};
use crate::data::{Dataset, SplitIndices};
use crate::error::{Error, Result};
use crate::losses::{
    binarize_by_median, build_losses, loss_adjustment, loss_instrument, loss_orthogonal,
    loss_regression, Batch, Coefficients, KernelSpec, LossReport,
};
use crate::metrics::{evaluate, EvalReport, Scope};
use crate::model::{
    build_model, contribution_profile, BnMode, BoundModel, ContributionProfile, DeRCFRModel,
    LayerCount, ModelConfig,
};

// ── Hyperparameters ──────────────────────────────────────────────────

/// Declared search grid.
pub const COEFFICIENT_SPACE: [f64; 7] = [1e-3, 1e-2, 1.0, 5.0, 10.0, 20.0, 50.0];
pub const DEPTH_SPACE: [usize; 5] = [1, 2, 3, 5, 7];
pub const WIDTH_SPACE: [usize; 4] = [32, 64, 128, 256];
pub const LAYER_COUNT_SPACE: [LayerCount; 2] = [LayerCount::First(2), LayerCount::All];

/// Objective coefficients, architecture dimensions and normalization flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub lambda: f64,
    /// How many leading weight matrices enter the contribution product.
    pub layer_count: LayerCount,
    pub batch_norm: bool,
    pub rep_normalize: bool,
    pub rep_depth: usize,
    pub out_depth: usize,
    pub treat_depth: usize,
    pub rep_width: usize,
    pub out_width: usize,
    pub treat_width: usize,
}

impl Hyperparams {
    /// Named presets with tuned values per benchmark family. The preset
    /// coefficient values are fixed verbatim and may fall outside the search
    /// grid used by [`hyper_search`].
    pub fn preset(name: &str) -> Option<Hyperparams> {
        let (l, bn, rep_norm, d, h, c) = match name {
            "ihdp" => (
                LayerCount::First(2),
                false,
                true,
                [7, 4, 1],
                [32, 256, 256],
                [5.0, 50.0, 1.0, 10.0, 1e-2],
            ),
            "jobs" => (
                LayerCount::First(2),
                true,
                true,
                [5, 4, 1],
                [32, 128, 128],
                [1e-2, 1.0, 1e-2, 5.0, 1e-3],
            ),
            "twins" => (
                LayerCount::All,
                true,
                true,
                [7, 7, 3],
                [64, 64, 64],
                [1e-2, 1e-4, 1e-4, 5.0, 5.0],
            ),
            "syn" => (
                LayerCount::All,
                true,
                false,
                [2, 2, 3],
                [256, 256, 256],
                [1e-3, 1e-3, 1.0, 1.0, 1e-3],
            ),
            _ => return None,
        };
        Some(Hyperparams {
            alpha: c[0],
            beta: c[1],
            gamma: c[2],
            mu: c[3],
            lambda: c[4],
            layer_count: l,
            batch_norm: bn,
            rep_normalize: rep_norm,
            rep_depth: d[0],
            out_depth: d[1],
            treat_depth: d[2],
            rep_width: h[0],
            out_width: h[1],
            treat_width: h[2],
        })
    }

    /// Model dimensions for a dataset. The representation output dimension
    /// equals the representation hidden width.
    pub fn model_config(&self, input_dim: usize, binary_outcome: bool) -> ModelConfig {
        ModelConfig {
            input_dim,
            rep_dim: self.rep_width,
            rep_depth: self.rep_depth,
            rep_width: self.rep_width,
            out_depth: self.out_depth,
            out_width: self.out_width,
            treat_depth: self.treat_depth,
            treat_width: self.treat_width,
            batch_norm: self.batch_norm,
            rep_normalize: self.rep_normalize,
            binary_outcome,
        }
    }

    /// Effective objective coefficients after applying ablation switches.
    pub fn coefficients(&self, ablation: &Ablation) -> Coefficients {
        Coefficients {
            alpha: if ablation.no_adjustment { 0.0 } else { self.alpha },
            beta: if ablation.no_instrument { 0.0 } else { self.beta },
            gamma: if ablation.no_balance { 0.0 } else { self.gamma },
            mu: if ablation.no_orthogonal { 0.0 } else { self.mu },
            lambda: self.lambda,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu", self.mu),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.rep_depth < 1 || self.out_depth < 1 || self.treat_depth < 1 {
            return Err(Error::Config("network depths must be >= 1".into()));
        }
        if self.rep_width < 1 || self.out_width < 1 || self.treat_width < 1 {
            return Err(Error::Config("network widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Switches that zero one objective coefficient each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_adjustment: bool,
    pub no_instrument: bool,
    pub no_balance: bool,
    pub no_orthogonal: bool,
}

/// Optimization settings independent of the hyperparameter grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub kernel: KernelSpec,
    pub seed: u64,
    pub ablation: Ablation,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            iterations: 3000,
            kernel: KernelSpec::Linear,
            seed,
            ablation: Ablation::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iteration count must be >= 1".into()));
        }
        self.kernel.validate()
    }
}

/// A finished training run.
pub struct TrainResult {
    pub model: DeRCFRModel,
    pub trajectory: Vec<LossReport>,
    pub profile: ContributionProfile,
    pub wall_seconds: f64,
    /// Validation objective under uniform weights, when a validation set was
    /// supplied and usable.
    pub validation_objective: Option<f64>,
}

// ── Training loop ────────────────────────────────────────────────────

/// Train a model by alternating full-batch updates.
pub fn train(
    train_ds: &Dataset,
    valid_ds: Option<&Dataset>,
    hp: &Hyperparams,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    hp.validate()?;
    cfg.validate()?;
    let started = Instant::now();

    let binary = train_ds.outcome_type.is_binary();
    let classes = if binary {
        train_ds.y_f.clone()
    } else {
        binarize_by_median(&train_ds.y_f, &train_ds.t)?
    };
    let batch = Batch::new(&train_ds.t, &classes)?;
    if !batch.both_arms_nonempty() {
        return Err(Error::DegenerateInput("training set needs both treatment arms".into()));
    }
    for k in 0..2 {
        if batch.cells[k][0].is_empty() || batch.cells[k][1].is_empty() {
            log::warn!(
                "treatment arm {k} has a single outcome class; its instrument distance term will be skipped"
            );
        }
    }

    let mut model = build_model(&hp.model_config(train_ds.m(), binary), &train_ds.t, cfg.seed)?;
    let coeffs = hp.coefficients(&cfg.ablation);
    let x = Tensor::constant(train_ds.n(), train_ds.m(), train_ds.x().to_vec())?;

    let mut adam_networks = AdamState::new(&model.network_param_sizes(), cfg.learning_rate);
    let mut adam_weights = AdamState::new(&[model.rho.len()], cfg.learning_rate);

    let mut trajectory = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model, true)?;
        let fwd = bound.forward_training(&mut tape, &x, &batch.arm[0], &batch.arm[1])?;
        let omega = bound.omega(&mut tape)?;
        let assembled = build_losses(
            &mut tape,
            &bound,
            &fwd,
            &omega,
            &train_ds.y_f,
            &train_ds.t,
            &batch,
            binary,
            &coeffs,
            &cfg.kernel,
            hp.layer_count,
        )
        .map_err(|e| match e {
            Error::Ad(crate::error::AdError::NonFinite { op }) => Error::NonFiniteLoss {
                iteration,
                term: op.to_string(),
            },
            other => other,
        })?;
        if let Some(term) = assembled.report.non_finite_term() {
            return Err(Error::NonFiniteLoss {
                iteration,
                term: term.to_string(),
            });
        }

        // Both phase gradients are evaluated at the same parameter values,
        // then both updates apply; only network parameters see the
        // network-phase objective and only rho sees the weight-phase one.
        let network_ids = bound.network_leaf_ids();
        let grads_networks = tape.backward_for(&assembled.phase_network, &network_ids)?;
        let rho_id = bound.rho.node_id().expect("rho is a leaf in training");
        let grads_weights = tape.backward_for(&assembled.phase_weight, &[rho_id])?;

        let net_grads: Vec<Vec<f64>> = bound
            .network_param_tensors()
            .iter()
            .map(|t| grads_networks.dense(t))
            .collect();
        let grad_refs: Vec<&[f64]> = net_grads.iter().map(|g| g.as_slice()).collect();
        let mut params = model.network_params_mut();
        adam_networks
            .step(&mut params, &grad_refs)
            .map_err(|_| Error::NonFiniteLoss {
                iteration,
                term: "network gradient".into(),
            })?;

        let rho_grad = grads_weights.dense(&bound.rho);
        adam_weights
            .step(&mut [&mut model.rho], &[&rho_grad])
            .map_err(|_| Error::NonFiniteLoss {
                iteration,
                term: "weight gradient".into(),
            })?;

        model.update_running_stats(&fwd.bn_stats);
        trajectory.push(assembled.report);
    }

    let profile = contribution_profile(&model, hp.layer_count)?;
    let validation_objective = match valid_ds {
        None => None,
        Some(valid) => match validation_objective(&model, valid, hp, &cfg.ablation, &cfg.kernel) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("validation objective unavailable: {e}");
                None
            }
        },
    };

    Ok(TrainResult {
        model,
        trajectory,
        profile,
        wall_seconds: started.elapsed().as_secs_f64(),
        validation_objective,
    })
}

/// Model-selection objective on held-out data: regression, adjustment,
/// instrument and orthogonality terms under uniform per-arm weights (held-out
/// samples have no learned weights), using frozen normalization statistics.
/// The balance term and the regularizers are excluded.
pub fn validation_objective(
    model: &DeRCFRModel,
    valid_ds: &Dataset,
    hp: &Hyperparams,
    ablation: &Ablation,
    kernel: &KernelSpec,
) -> Result<f64> {
    let binary = valid_ds.outcome_type.is_binary();
    let classes = if binary {
        valid_ds.y_f.clone()
    } else {
        binarize_by_median(&valid_ds.y_f, &valid_ds.t)?
    };
    let batch = Batch::new(&valid_ds.t, &classes)?;
    if !batch.both_arms_nonempty() {
        return Err(Error::DegenerateInput("validation set needs both treatment arms".into()));
    }
    let coeffs = hp.coefficients(ablation);

    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model, false)?;
    let x = Tensor::constant(valid_ds.n(), valid_ds.m(), valid_ds.x().to_vec())?;
    let fwd = bound.forward_all(&mut tape, &x, BnMode::Eval)?;

    let n0 = batch.arm[0].len() as f64;
    let n1 = batch.arm[1].len() as f64;
    let uniform: Vec<f64> = valid_ds
        .t
        .iter()
        .map(|&t| if t == 1 { 1.0 / n1 } else { 1.0 / n0 })
        .collect();
    let omega = Tensor::column(uniform)?;

    let own0 = tape.gather_rows(&fwd.y0_hat, &batch.arm[0])?;
    let own1 = tape.gather_rows(&fwd.y1_hat, &batch.arm[1])?;
    let mut objective = loss_regression(
        &mut tape,
        &[own0, own1],
        &valid_ds.y_f,
        &omega,
        &batch,
        binary,
    )?
    .item();

    if coeffs.alpha != 0.0 {
        let l_a = loss_adjustment(
            &mut tape,
            &fwd.rep_adjustment,
            &fwd.y_adj_hat,
            &valid_ds.y_f,
            &batch,
            binary,
            kernel,
        )?;
        objective += coeffs.alpha * l_a.item();
    }
    if coeffs.beta != 0.0 {
        let l_i = loss_instrument(
            &mut tape,
            &fwd.rep_instrument,
            &fwd.t_hat,
            &valid_ds.t,
            &omega,
            &batch,
            kernel,
        )?;
        objective += coeffs.beta * l_i.item();
    }
    if coeffs.mu != 0.0 {
        let contributions = bound.contributions(&mut tape, hp.layer_count)?;
        let l_o = loss_orthogonal(&mut tape, &contributions)?;
        objective += coeffs.mu * l_o.item();
    }
    if !objective.is_finite() {
        return Err(Error::DegenerateInput("validation objective is not finite".into()));
    }
    Ok(objective)
}

/// Train on the split's training part and evaluate within-sample
/// (train + validation units) and out-of-sample (test units).
pub fn train_and_evaluate(
    ds: &Dataset,
    splits: &SplitIndices,
    hp: &Hyperparams,
    cfg: &TrainConfig,
) -> Result<(TrainResult, EvalReport, EvalReport)> {
    let train_ds = ds.subset(&splits.train);
    let valid_ds = ds.subset(&splits.valid);
    let result = train(&train_ds, Some(&valid_ds), hp, cfg)?;
    let within_ds = ds.subset_union(&splits.train, &splits.valid);
    let within = evaluate(&result.model, &within_ds, Scope::WithinSample)?;
    let out = evaluate(&result.model, &ds.subset(&splits.test), Scope::OutOfSample)?;
    Ok((result, within, out))
}

// ── Hyperparameter search ────────────────────────────────────────────

/// One search trial: the sampled configuration and its validation objective,
/// or the failure that disqualified it.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub index: usize,
    pub hyperparams: Hyperparams,
    pub objective: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub best: Option<Hyperparams>,
    pub best_objective: Option<f64>,
    pub trials: Vec<TrialRecord>,
}

fn sample_coefficient(rng: &mut ChaCha8Rng) -> f64 {
    COEFFICIENT_SPACE[rng.random_range(0..COEFFICIENT_SPACE.len())]
}

fn sample_depth(rng: &mut ChaCha8Rng) -> usize {
    DEPTH_SPACE[rng.random_range(0..DEPTH_SPACE.len())]
}

fn sample_width(rng: &mut ChaCha8Rng) -> usize {
    WIDTH_SPACE[rng.random_range(0..WIDTH_SPACE.len())]
}

/// Draw one configuration uniformly from the declared grid.
pub fn sample_hyperparams(rng: &mut ChaCha8Rng) -> Hyperparams {
    Hyperparams {
        alpha: sample_coefficient(rng),
        beta: sample_coefficient(rng),
        gamma: sample_coefficient(rng),
        mu: sample_coefficient(rng),
        lambda: sample_coefficient(rng),
        layer_count: LAYER_COUNT_SPACE[rng.random_range(0..2)],
        batch_norm: rng.random::<bool>(),
        rep_normalize: rng.random::<bool>(),
        rep_depth: sample_depth(rng),
        out_depth: sample_depth(rng),
        treat_depth: sample_depth(rng),
        rep_width: sample_width(rng),
        out_width: sample_width(rng),
        treat_width: sample_width(rng),
    }
}

fn sample_architecture(rng: &mut ChaCha8Rng) -> Hyperparams {
    let mut hp = sample_hyperparams(rng);
    hp.alpha = 0.0;
    hp.beta = 0.0;
    hp.gamma = 0.0;
    hp.mu = 0.0;
    hp.lambda = 0.0;
    hp.layer_count = LayerCount::All;
    hp
}

/// Random search over the declared grid, selecting by the validation
/// objective. With `two_stage` the first half of the budget fixes the
/// architecture dimensions and normalization flags with all coefficients
/// zeroed, and the second half searches the coefficients and the constrained
/// layer count on the chosen architecture.
pub fn hyper_search(
    ds: &Dataset,
    splits: &SplitIndices,
    trials: usize,
    seed: u64,
    cfg: &TrainConfig,
    two_stage: bool,
) -> Result<SearchResult> {
    if trials < 1 {
        return Err(Error::Config("search needs at least one trial".into()));
    }
    let train_ds = ds.subset(&splits.train);
    let valid_ds = ds.subset(&splits.valid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut records = Vec::with_capacity(trials);
    let mut best: Option<(f64, Hyperparams)> = None;

    let mut run_trial = |index: usize, hp: Hyperparams, best: &mut Option<(f64, Hyperparams)>| {
        let outcome = train(&train_ds, Some(&valid_ds), &hp, cfg);
        let record = match outcome {
            Ok(result) => match result.validation_objective {
                Some(objective) => {
                    if best.as_ref().is_none_or(|(b, _)| objective < *b) {
                        *best = Some((objective, hp.clone()));
                    }
                    TrialRecord {
                        index,
                        hyperparams: hp,
                        objective: Some(objective),
                        error: None,
                    }
                }
                None => TrialRecord {
                    index,
                    hyperparams: hp,
                    objective: None,
                    error: Some("validation objective unavailable".into()),
                },
            },
            Err(e) => {
                log::warn!("search trial {index} failed: {e}");
                TrialRecord {
                    index,
                    hyperparams: hp,
                    objective: None,
                    error: Some(e.to_string()),
                }
            }
        };
        records.push(record);
    };

    if two_stage && trials >= 2 {
        let stage_a = trials.div_ceil(2);
        let mut best_arch: Option<(f64, Hyperparams)> = None;
        for i in 0..stage_a {
            run_trial(i, sample_architecture(&mut rng), &mut best_arch);
        }
        let arch = best_arch
            .as_ref()
            .map(|(_, hp)| hp.clone())
            .unwrap_or_else(|| Hyperparams::preset("syn").expect("known preset"));
        for i in stage_a..trials {
            let draw = sample_hyperparams(&mut rng);
            let hp = Hyperparams {
                alpha: draw.alpha,
                beta: draw.beta,
                gamma: draw.gamma,
                mu: draw.mu,
                lambda: draw.lambda,
                layer_count: draw.layer_count,
                ..arch.clone()
            };
            run_trial(i, hp, &mut best);
        }
        if best.is_none() {
            best = best_arch;
        }
    } else {
        for i in 0..trials {
            run_trial(i, sample_hyperparams(&mut rng), &mut best);
        }
    }

    let (best_objective, best) = match best {
        Some((o, hp)) => (Some(o), Some(hp)),
        None => (None, None),
    };
    Ok(SearchResult {
        best,
        best_objective,
        trials: records,
    })
}

// ── Ablation harness ─────────────────────────────────────────────────

/// Label and switches of one ablation row.
pub const ABLATION_ROWS: [(&str, Ablation); 5] = [
    (
        "full",
        Ablation {
            no_adjustment: false,
            no_instrument: false,
            no_balance: false,
            no_orthogonal: false,
        },
    ),
    (
        "-orthogonal",
        Ablation {
            no_adjustment: false,
            no_instrument: false,
            no_balance: false,
            no_orthogonal: true,
        },
    ),
    (
        "-balance",
        Ablation {
            no_adjustment: false,
            no_instrument: false,
            no_balance: true,
            no_orthogonal: false,
        },
    ),
    (
        "-instrument",
        Ablation {
            no_adjustment: false,
            no_instrument: true,
            no_balance: false,
            no_orthogonal: false,
        },
    ),
    (
        "-adjustment",
        Ablation {
            no_adjustment: true,
            no_instrument: false,
            no_balance: false,
            no_orthogonal: false,
        },
    ),
];

pub struct AblationRow {
    pub label: &'static str,
    pub result: TrainResult,
    pub within: EvalReport,
    pub out_of_sample: EvalReport,
}

/// Train the full objective and the four single-term ablations from the same
/// seed, evaluating each.
pub fn ablate(ds: &Dataset, splits: &SplitIndices, hp: &Hyperparams, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (label, ablation) in ABLATION_ROWS {
        let mut row_cfg = cfg.clone();
        row_cfg.ablation = ablation;
        let (result, within, out) = train_and_evaluate(ds, splits, hp, &row_cfg)?;
        rows.push(AblationRow {
            label,
            result,
            within,
            out_of_sample: out,
        });
    }
    Ok(rows)
}

// ── Replication utilities ────────────────────────────────────────────

/// Deterministically derive an independent seed for a replication stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add((stream.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run `count` independent jobs over a bounded worker pool. Results come
/// back in job order.
pub fn run_replications<T, F>(count: usize, threads: usize, job: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = threads.clamp(1, count.max(1));
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..count).map(|_| Mutex::new(None)).collect();
    if workers <= 1 {
        for (i, slot) in slots.iter().enumerate() {
            *slot.lock().expect("slot lock") = Some(job(i));
        }
    } else {
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= count {
                        break;
                    }
                    let result = job(i);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
    }
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("job ran"))
        .collect()
}

/// Mean and (population) standard deviation used by replication summaries.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
