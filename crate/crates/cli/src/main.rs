//! Command-line front end: dataset generation, training, evaluation,
//! ablation, hyperparameter search and identification reports, with
//! replication support and mean/std aggregation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dercfr_core::data::{self, Dataset, LoadOptions, SplitSpec, SyntheticConfig};
use dercfr_core::losses::{Bandwidth, KernelSpec};
use dercfr_core::metrics::{self, identification_report, EvalReport};
use dercfr_core::model::{contribution_profile, DeRCFRModel, LayerCount, TrainMeta};
use dercfr_core::trainer::{
    self, ablate, derive_seed, hyper_search, mean_std, run_replications, train_and_evaluate,
    Hyperparams, TrainConfig,
};
use dercfr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dercfr",
    about = "Decomposed-representation counterfactual regression",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset (CSV plus .meta sidecar).
    Gen(GenArgs),
    /// Train a model and write its artifacts.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset.
    Eval(EvalArgs),
    /// Train the full objective and its four single-term ablations.
    Ablate(AblateArgs),
    /// Random hyperparameter search over the declared grid.
    Search(SearchArgs),
    /// Identification report of a trained model.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Instrument-block dimension.
    #[arg(long)]
    mi: usize,
    /// Confounder-block dimension.
    #[arg(long)]
    mc: usize,
    /// Adjustment-block dimension.
    #[arg(long)]
    ma: usize,
    /// Noise dimensions appended after the causal blocks.
    #[arg(long, default_value_t = 2)]
    md: usize,
    /// Sample count.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Basename of the CSV file.
    #[arg(long, default_value = "syn")]
    name: String,
}

#[derive(Args, Clone)]
struct HyperSource {
    /// Named preset: ihdp, jobs, twins or syn.
    #[arg(long, conflicts_with = "hp_file")]
    preset: Option<String>,
    /// key=value hyperparameter file.
    #[arg(long)]
    hp_file: Option<PathBuf>,
}

impl HyperSource {
    fn resolve(&self) -> Result<Hyperparams> {
        match (&self.preset, &self.hp_file) {
            (Some(name), None) => Hyperparams::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown preset {name:?}; expected ihdp, jobs, twins or syn"))),
            (None, Some(path)) => parse_hp_file(path),
            (None, None) => Err(Error::Config("provide --preset or --hp-file".into())),
            (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
        }
    }
}

#[derive(Args, Clone)]
struct TrainOpts {
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Full-batch iterations.
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    /// Distribution-distance kernel: linear or rbf.
    #[arg(long, default_value = "linear")]
    kernel: String,
    /// RBF bandwidth: a positive number or "median".
    #[arg(long, default_value = "median")]
    bandwidth: String,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> Result<TrainConfig> {
        let kernel = match self.kernel.as_str() {
            "linear" => KernelSpec::Linear,
            "rbf" => KernelSpec::Rbf {
                bandwidth: match self.bandwidth.as_str() {
                    "median" => Bandwidth::MedianHeuristic,
                    s => Bandwidth::Fixed(s.parse().map_err(|_| {
                        Error::Config(format!("bandwidth must be a number or \"median\", got {s:?}"))
                    })?),
                },
            },
            other => return Err(Error::Config(format!("unknown kernel {other:?}"))),
        };
        let mut cfg = TrainConfig::new(seed);
        cfg.learning_rate = self.lr;
        cfg.iterations = self.iters;
        cfg.kernel = kernel;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    hyper: HyperSource,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    seed: u64,
    /// Shuffling seed of the train/validation/test split (defaults to --seed).
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Replications with derived seeds; results are aggregated.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Worker threads for replications (DERCFR_THREADS also applies; the flag wins).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the split seed recorded in the model file.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    hyper: HyperSource,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    trials: usize,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Fix architecture dimensions first, then search the coefficients.
    #[arg(long)]
    two_stage: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV; its .meta sidecar provides ground-truth roles.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Contribution layer count: a number or "all" (defaults to the value
    /// recorded in the model).
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Search(args) => cmd_search(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn thread_count(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("DERCFR_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    })
    .unwrap_or(1)
    .max(1)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    data::load_csv(path, &LoadOptions::default())
}

fn parse_hp_file(path: &Path) -> Result<Hyperparams> {
    let text = std::fs::read_to_string(path)?;
    // Start from the synthetic preset so partial files stay usable.
    let mut hp = Hyperparams::preset("syn").expect("known preset");
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            row: Some(lineno + 1),
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected key=value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_f = || value.parse::<f64>().map_err(|_| err(format!("invalid number {value:?}")));
        let parse_u = || value.parse::<usize>().map_err(|_| err(format!("invalid integer {value:?}")));
        let parse_b = || value.parse::<bool>().map_err(|_| err(format!("invalid flag {value:?}")));
        match key {
            "alpha" => hp.alpha = parse_f()?,
            "beta" => hp.beta = parse_f()?,
            "gamma" => hp.gamma = parse_f()?,
            "mu" => hp.mu = parse_f()?,
            "lambda" => hp.lambda = parse_f()?,
            "layer_count" => {
                hp.layer_count = if value == "all" {
                    LayerCount::All
                } else {
                    LayerCount::First(parse_u()?)
                }
            }
            "batch_norm" => hp.batch_norm = parse_b()?,
            "rep_normalize" => hp.rep_normalize = parse_b()?,
            "rep_depth" => hp.rep_depth = parse_u()?,
            "out_depth" => hp.out_depth = parse_u()?,
            "treat_depth" => hp.treat_depth = parse_u()?,
            "rep_width" => hp.rep_width = parse_u()?,
            "out_width" => hp.out_width = parse_u()?,
            "treat_width" => hp.treat_width = parse_u()?,
            other => return Err(err(format!("unknown hyperparameter {other:?}"))),
        }
    }
    Ok(hp)
}

// ── gen ──────────────────────────────────────────────────────────────

fn cmd_gen(args: GenArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        m_instrument: args.mi,
        m_confounder: args.mc,
        m_adjustment: args.ma,
        m_noise: args.md,
        n: args.n,
        seed: args.seed,
    };
    let ds = data::generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join(format!("{}.csv", args.name));
    data::save_csv(&ds, &path)?;
    println!(
        "wrote {} ({} units, {} covariates) and {}",
        path.display(),
        ds.n(),
        ds.m(),
        path.with_extension("meta").display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ResolvedConfig {
    data: String,
    hyperparams: Hyperparams,
    train: TrainConfig,
    split: SplitSpec,
    seed: u64,
    reps: usize,
    threads: usize,
}

#[derive(Serialize)]
struct MetricsOut {
    within_sample: EvalReport,
    out_of_sample: EvalReport,
}

#[derive(Serialize)]
struct TrainResultOut {
    config: ResolvedConfig,
    validation_objective: Option<f64>,
    final_loss: dercfr_core::LossReport,
    metrics: Option<MetricsOut>,
    wall_seconds: f64,
}

struct RepOutcome {
    within: EvalReport,
    out: EvalReport,
    final_loss: dercfr_core::LossReport,
}

fn write_losses_csv(path: &Path, trajectory: &[dercfr_core::LossReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["iteration".to_string()];
    header.extend(dercfr_core::LossReport::field_names().iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (i, report) in trajectory.iter().enumerate() {
        let mut record = vec![(i + 1).to_string()];
        record.extend(report.fields().iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_contributions_csv(
    path: &Path,
    profile: &dercfr_core::ContributionProfile,
    roles: Option<&[dercfr_core::VarRole]>,
) -> Result<()> {
    let report = identification_report(profile, roles);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["variable", "role", "w_instrument", "w_confounder", "w_adjustment"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for row in &report.rows {
        w.write_record([
            row.variable.to_string(),
            row.role.map(|r| r.short().to_string()).unwrap_or_default(),
            row.w_instrument.to_string(),
            row.w_confounder.to_string(),
            row.w_adjustment.to_string(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_one_training(
    ds: &Dataset,
    hp: &Hyperparams,
    opts: &TrainOpts,
    seed: u64,
    split_seed: u64,
    out_dir: &Path,
    data_path: &Path,
    reps: usize,
    threads: usize,
) -> Result<RepOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let split_spec = SplitSpec::new(split_seed);
    let splits = data::split(ds, &split_spec)?;
    let cfg = opts.config(seed)?;
    let (mut result, within, out) = train_and_evaluate(ds, &splits, hp, &cfg)?;

    result.model.train_meta = Some(TrainMeta {
        seed,
        split: split_spec,
        layer_count: hp.layer_count,
    });
    result.model.save(&out_dir.join("model.dercfr"))?;
    write_losses_csv(&out_dir.join("losses.csv"), &result.trajectory)?;
    write_contributions_csv(&out_dir.join("contributions.csv"), &result.profile, ds.roles.as_deref())?;

    let final_loss = *result.trajectory.last().expect("at least one iteration");
    let has_metrics = within.pehe.is_some() || within.policy_risk.is_some();
    let out_json = TrainResultOut {
        config: ResolvedConfig {
            data: data_path.display().to_string(),
            hyperparams: hp.clone(),
            train: cfg,
            split: split_spec,
            seed,
            reps,
            threads,
        },
        validation_objective: result.validation_objective,
        final_loss,
        metrics: has_metrics.then(|| MetricsOut {
            within_sample: within.clone(),
            out_of_sample: out.clone(),
        }),
        wall_seconds: result.wall_seconds,
    };
    write_json(&out_dir.join("result.json"), &out_json)?;
    Ok(RepOutcome {
        within,
        out,
        final_loss,
    })
}

#[derive(Serialize)]
struct Aggregate {
    mean: f64,
    std: f64,
    values: Vec<f64>,
}

fn aggregate(values: Vec<f64>) -> Aggregate {
    let (mean, std) = mean_std(&values);
    Aggregate { mean, std, values }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let hp = args.hyper.resolve()?;
    let threads = thread_count(args.threads);
    let split_seed = args.split_seed.unwrap_or(args.seed);

    if args.reps == 1 {
        run_one_training(
            &ds, &hp, &args.opts, args.seed, split_seed, &args.out, &args.data, 1, threads,
        )?;
        println!("wrote {}", args.out.join("result.json").display());
        return Ok(());
    }

    std::fs::create_dir_all(&args.out)?;
    let outcomes = run_replications(args.reps, threads, |rep| {
        let rep_seed = derive_seed(args.seed, rep as u64);
        let rep_split = derive_seed(split_seed, rep as u64);
        run_one_training(
            &ds,
            &hp,
            &args.opts,
            rep_seed,
            rep_split,
            &args.out.join(format!("rep_{rep:02}")),
            &args.data,
            args.reps,
            threads,
        )
    });

    let mut ok = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => ok.push(o),
            Err(e) => log::warn!("replication {rep} failed: {e}"),
        }
    }
    if ok.is_empty() {
        return Err(Error::DegenerateInput("all replications failed".into()));
    }

    #[derive(Serialize)]
    struct TrainAggregate {
        reps_requested: usize,
        reps_completed: usize,
        final_total_loss: Aggregate,
        pehe_within: Option<Aggregate>,
        pehe_out: Option<Aggregate>,
        ate_error_within: Option<Aggregate>,
        ate_error_out: Option<Aggregate>,
    }
    let collect = |f: &dyn Fn(&RepOutcome) -> Option<f64>| -> Option<Aggregate> {
        let v: Vec<f64> = ok.iter().filter_map(f).collect();
        (v.len() == ok.len()).then(|| aggregate(v))
    };
    let agg = TrainAggregate {
        reps_requested: args.reps,
        reps_completed: ok.len(),
        final_total_loss: aggregate(ok.iter().map(|o| o.final_loss.total).collect()),
        pehe_within: collect(&|o| o.within.pehe),
        pehe_out: collect(&|o| o.out.pehe),
        ate_error_within: collect(&|o| o.within.ate_error),
        ate_error_out: collect(&|o| o.out.ate_error),
    };
    write_json(&args.out.join("aggregate.json"), &agg)?;
    println!("wrote {}", args.out.join("aggregate.json").display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let model = DeRCFRModel::load(&args.model)?;
    let split_spec = match (args.split_seed, &model.train_meta) {
        (Some(seed), _) => SplitSpec::new(seed),
        (None, Some(meta)) => meta.split,
        (None, None) => {
            return Err(Error::Config(
                "model carries no split information; pass --split-seed".into(),
            ))
        }
    };
    let splits = data::split(&ds, &split_spec)?;
    let within_ds = ds.subset_union(&splits.train, &splits.valid);
    let within = metrics::evaluate(&model, &within_ds, metrics::Scope::WithinSample)?;
    let out = metrics::evaluate(&model, &ds.subset(&splits.test), metrics::Scope::OutOfSample)?;

    #[derive(Serialize)]
    struct EvalOut {
        config: EvalConfig,
        within_sample: EvalReport,
        out_of_sample: EvalReport,
    }
    #[derive(Serialize)]
    struct EvalConfig {
        model: String,
        data: String,
        split: SplitSpec,
    }
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("metrics.json");
    write_json(
        &path,
        &EvalOut {
            config: EvalConfig {
                model: args.model.display().to_string(),
                data: args.data.display().to_string(),
                split: split_spec,
            },
            within_sample: within,
            out_of_sample: out,
        },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────

type AblationCells = (String, Option<f64>, Option<f64>, Option<f64>, Option<f64>);

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let hp = args.hyper.resolve()?;
    let threads = thread_count(args.threads);
    let split_seed = args.split_seed.unwrap_or(args.seed);
    std::fs::create_dir_all(&args.out)?;

    let outcomes = run_replications(args.reps, threads, |rep| {
        let rep_seed = derive_seed(args.seed, rep as u64);
        let rep_split = derive_seed(split_seed, rep as u64);
        let splits = data::split(&ds, &SplitSpec::new(rep_split))?;
        let cfg = args.opts.config(rep_seed)?;
        let rows = ablate(&ds, &splits, &hp, &cfg)?;
        Ok(rows
            .into_iter()
            .map(|r| {
                (
                    r.label.to_string(),
                    r.within.pehe,
                    r.out_of_sample.pehe,
                    r.within.ate_error,
                    r.out_of_sample.ate_error,
                )
            })
            .collect::<Vec<AblationCells>>())
    });
    let mut ok = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => ok.push(r),
            Err(e) => log::warn!("ablation replication {rep} failed: {e}"),
        }
    }
    if ok.is_empty() {
        return Err(Error::DegenerateInput("all ablation replications failed".into()));
    }

    // One row per variant with mean/std across replications.
    let path = args.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record([
        "variant",
        "pehe_within_mean",
        "pehe_within_std",
        "pehe_out_mean",
        "pehe_out_std",
        "ate_error_within_mean",
        "ate_error_out_mean",
        "reps",
    ])
    .map_err(|e| Error::Format(e.to_string()))?;
    let labels: Vec<String> = ok[0].iter().map(|r| r.0.clone()).collect();
    for (i, label) in labels.iter().enumerate() {
        let col = |pick: &dyn Fn(&AblationCells) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|r| pick(&r[i])).collect();
            mean_std(&v)
        };
        let (pw_m, pw_s) = col(&|r| r.1);
        let (po_m, po_s) = col(&|r| r.2);
        let (aw_m, _) = col(&|r| r.3);
        let (ao_m, _) = col(&|r| r.4);
        w.write_record([
            label.clone(),
            pw_m.to_string(),
            pw_s.to_string(),
            po_m.to_string(),
            po_s.to_string(),
            aw_m.to_string(),
            ao_m.to_string(),
            ok.len().to_string(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

// ── search ───────────────────────────────────────────────────────────

fn cmd_search(args: SearchArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let split_seed = args.split_seed.unwrap_or(args.seed);
    let splits = data::split(&ds, &SplitSpec::new(split_seed))?;
    let cfg = args.opts.config(args.seed)?;
    let result = hyper_search(&ds, &splits, args.trials, args.seed, &cfg, args.two_stage)?;

    std::fs::create_dir_all(&args.out)?;
    #[derive(Serialize)]
    struct SearchOut<'a> {
        config: SearchConfig,
        best: &'a Option<Hyperparams>,
        best_objective: Option<f64>,
        trials: &'a [trainer::TrialRecord],
    }
    #[derive(Serialize)]
    struct SearchConfig {
        data: String,
        trials: usize,
        seed: u64,
        split: SplitSpec,
        two_stage: bool,
        train: TrainConfig,
    }
    let path = args.out.join("search.json");
    write_json(
        &path,
        &SearchOut {
            config: SearchConfig {
                data: args.data.display().to_string(),
                trials: args.trials,
                seed: args.seed,
                split: SplitSpec::new(split_seed),
                two_stage: args.two_stage,
                train: cfg,
            },
            best: &result.best,
            best_objective: result.best_objective,
            trials: &result.trials,
        },
    )?;
    if let Some(best) = &result.best {
        let hp_path = args.out.join("best.hp");
        std::fs::write(&hp_path, hp_file_text(best))?;
        println!("wrote {} and {}", path.display(), hp_path.display());
    } else {
        println!("wrote {} (no successful trial)", path.display());
    }
    Ok(())
}

fn hp_file_text(hp: &Hyperparams) -> String {
    format!(
        "alpha={}\nbeta={}\ngamma={}\nmu={}\nlambda={}\nlayer_count={}\nbatch_norm={}\nrep_normalize={}\nrep_depth={}\nout_depth={}\ntreat_depth={}\nrep_width={}\nout_width={}\ntreat_width={}\n",
        hp.alpha,
        hp.beta,
        hp.gamma,
        hp.mu,
        hp.lambda,
        hp.layer_count,
        hp.batch_norm,
        hp.rep_normalize,
        hp.rep_depth,
        hp.out_depth,
        hp.treat_depth,
        hp.rep_width,
        hp.out_width,
        hp.treat_width,
    )
}

// ── report ───────────────────────────────────────────────────────────

fn cmd_report(args: ReportArgs) -> Result<()> {
    let model = DeRCFRModel::load(&args.model)?;
    let layer_count = match &args.layers {
        Some(s) if s == "all" => LayerCount::All,
        Some(s) => LayerCount::First(
            s.parse()
                .map_err(|_| Error::Config(format!("layers must be a number or \"all\", got {s:?}")))?,
        ),
        None => model
            .train_meta
            .as_ref()
            .map(|m| m.layer_count)
            .unwrap_or(LayerCount::All),
    };
    let roles = match &args.data {
        None => None,
        Some(path) => load_dataset(path)?.roles,
    };
    let profile = contribution_profile(&model, layer_count)?;
    let report = identification_report(&profile, roles.as_deref());

    std::fs::create_dir_all(&args.out)?;
    write_contributions_csv(&args.out.join("identification.csv"), &profile, roles.as_deref())?;

    #[derive(Serialize)]
    struct RadarOut<'a> {
        config: RadarConfig,
        summary: &'a Option<[metrics::FactorSummary; 3]>,
    }
    #[derive(Serialize)]
    struct RadarConfig {
        model: String,
        layers_used: usize,
    }
    write_json(
        &args.out.join("radar_summary.json"),
        &RadarOut {
            config: RadarConfig {
                model: args.model.display().to_string(),
                layers_used: profile.layers_used,
            },
            summary: &report.summary,
        },
    )?;
    println!(
        "wrote {} and {}",
        args.out.join("identification.csv").display(),
        args.out.join("radar_summary.json").display()
    );
    Ok(())
}
