//! Dataset handling: synthetic benchmark generation, splits, CSV interchange
//! and the twin-pair covariate augmentation.
//!
//! The CSV schema is `x1,...,xm,t,yf[,y0,y1][,e]` with a mandatory header.
//! A sidecar `<name>.meta` file of `key=value` lines carries generator
//! dimensions, variable roles, the seed and the outcome coefficients so a
//! generated dataset can be reproduced and audited.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, StandardNormal, Uniform};

use crate::ad::sigmoid;
use crate::error::{Error, Result};

/// Ground-truth generative role of one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum VarRole {
    Instrument,
    Confounder,
    Adjustment,
    Noise,
}

impl VarRole {
    pub fn short(&self) -> &'static str {
        match self {
            VarRole::Instrument => "I",
            VarRole::Confounder => "C",
            VarRole::Adjustment => "A",
            VarRole::Noise => "noise",
        }
    }

    fn parse(s: &str) -> Option<VarRole> {
        match s {
            "I" => Some(VarRole::Instrument),
            "C" => Some(VarRole::Confounder),
            "A" => Some(VarRole::Adjustment),
            "noise" => Some(VarRole::Noise),
            _ => None,
        }
    }
}

impl fmt::Display for VarRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Whether outcomes are {0,1} labels or unbounded reals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OutcomeType {
    Binary,
    Continuous,
}

impl OutcomeType {
    pub fn is_binary(&self) -> bool {
        matches!(self, OutcomeType::Binary)
    }
}

/// Configuration of the synthetic generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub m_instrument: usize,
    pub m_confounder: usize,
    pub m_adjustment: usize,
    /// Pure-noise covariates appended after the causal ones.
    pub m_noise: usize,
    pub n: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(m_instrument: usize, m_confounder: usize, m_adjustment: usize, n: usize, seed: u64) -> Self {
        SyntheticConfig {
            m_instrument,
            m_confounder,
            m_adjustment,
            m_noise: 2,
            n,
            seed,
        }
    }

    pub fn total_dims(&self) -> usize {
        self.m_instrument + self.m_confounder + self.m_adjustment + self.m_noise
    }

    fn validate(&self) -> Result<()> {
        if self.m_instrument < 1 || self.m_confounder < 1 || self.m_adjustment < 1 {
            return Err(Error::Config(
                "synthetic dims m_instrument/m_confounder/m_adjustment must be >= 1".into(),
            ));
        }
        if self.n < 10 {
            return Err(Error::Config(format!("synthetic n must be >= 10, got {}", self.n)));
        }
        Ok(())
    }
}

/// Generator coefficients kept for reproducibility.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticMeta {
    pub config: SyntheticConfig,
    pub theta_t: Vec<f64>,
    pub theta_y0: Vec<f64>,
    pub theta_y1: Vec<f64>,
}

/// Observational dataset: covariates, binary treatment, factual outcome, and
/// (when the source provides them) ground-truth potential outcomes, a
/// randomized-subsample flag and per-variable roles.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Vec<f64>,
    n: usize,
    m: usize,
    pub t: Vec<u8>,
    pub y_f: Vec<f64>,
    pub y0: Option<Vec<f64>>,
    pub y1: Option<Vec<f64>>,
    pub rct: Option<Vec<bool>>,
    pub roles: Option<Vec<VarRole>>,
    pub outcome_type: OutcomeType,
    pub synthetic_meta: Option<SyntheticMeta>,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x: Vec<f64>,
        n: usize,
        m: usize,
        t: Vec<u8>,
        y_f: Vec<f64>,
        y0: Option<Vec<f64>>,
        y1: Option<Vec<f64>>,
        outcome_type: OutcomeType,
    ) -> Result<Self> {
        if x.len() != n * m {
            return Err(Error::Contract(format!(
                "covariate matrix has {} values, expected {n} x {m}",
                x.len()
            )));
        }
        if t.len() != n || y_f.len() != n {
            return Err(Error::Contract("t and y_f must have one entry per unit".into()));
        }
        if t.iter().any(|&v| v > 1) {
            return Err(Error::Contract("treatment must be binary".into()));
        }
        for v in [&y0, &y1].into_iter().flatten() {
            if v.len() != n {
                return Err(Error::Contract("potential outcomes must have one entry per unit".into()));
            }
        }
        Ok(Dataset {
            x,
            n,
            m,
            t,
            y_f,
            y0,
            y1,
            rct: None,
            roles: None,
            outcome_type,
            synthetic_meta: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.m..(i + 1) * self.m]
    }

    pub fn has_ground_truth(&self) -> bool {
        self.y0.is_some() && self.y1.is_some()
    }

    /// Indices of control and treated units.
    pub fn arm_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut arm0 = Vec::new();
        let mut arm1 = Vec::new();
        for (i, &ti) in self.t.iter().enumerate() {
            if ti == 0 {
                arm0.push(i);
            } else {
                arm1.push(i);
            }
        }
        (arm0, arm1)
    }

    /// Average treatment effect from stored counterfactuals.
    pub fn true_ate(&self) -> Option<f64> {
        let (y0, y1) = (self.y0.as_ref()?, self.y1.as_ref()?);
        let n = self.n as f64;
        Some(y1.iter().zip(y0).map(|(a, b)| a - b).sum::<f64>() / n)
    }

    /// Copy of the rows selected by `idx`, preserving roles and metadata.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
        }
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        Dataset {
            x,
            n: idx.len(),
            m: self.m,
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y_f: pick(&self.y_f),
            y0: self.y0.as_ref().map(pick),
            y1: self.y1.as_ref().map(pick),
            rct: self.rct.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
            roles: self.roles.clone(),
            outcome_type: self.outcome_type,
            synthetic_meta: self.synthetic_meta.clone(),
        }
    }

    /// Concatenation of two row subsets (used for within-sample evaluation).
    pub fn subset_union(&self, a: &[usize], b: &[usize]) -> Dataset {
        let mut idx: Vec<usize> = Vec::with_capacity(a.len() + b.len());
        idx.extend_from_slice(a);
        idx.extend_from_slice(b);
        self.subset(&idx)
    }
}

/// y = 1 exactly when the centered score is strictly positive; sign(0) = 0.
fn threshold_positive(z: &[f64]) -> Vec<f64> {
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    z.iter().map(|&v| if v - mean > 0.0 { 1.0 } else { 0.0 }).collect()
}

/// Generate a synthetic observational dataset with known factor structure.
///
/// Covariates are standard normal. Treatment depends on the instrument and
/// confounder blocks through a logistic assignment; the control outcome is a
/// linear score of the confounder and adjustment blocks and the treated
/// outcome a quadratic one, both centered at their whole-sample mean and
/// thresholded to {0,1}.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let m = cfg.total_dims();
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x = Vec::with_capacity(n * m);
    for _ in 0..n * m {
        x.push(rng.sample::<f64, _>(StandardNormal));
    }

    let coeff = Uniform::new(8.0, 16.0).expect("valid range");
    let m_ic = cfg.m_instrument + cfg.m_confounder;
    let m_ca = cfg.m_confounder + cfg.m_adjustment;
    let theta_t: Vec<f64> = (0..m_ic).map(|_| rng.sample(coeff)).collect();
    let theta_y0: Vec<f64> = (0..m_ca).map(|_| rng.sample(coeff)).collect();
    let theta_y1: Vec<f64> = (0..m_ca).map(|_| rng.sample(coeff)).collect();

    // Treatment: z = theta_t . x_IC / 10 + noise, t ~ Bernoulli(sigmoid(z)).
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let s: f64 = theta_t.iter().zip(&row[..m_ic]).map(|(a, b)| a * b).sum();
        let eps: f64 = rng.sample(StandardNormal);
        z.push(s / 10.0 + eps);
    }
    let t: Vec<u8> = z
        .iter()
        .map(|&zi| u8::from(rng.random::<f64>() < sigmoid(zi)))
        .collect();

    // Outcome scores over the confounder and adjustment blocks.
    let ca_start = cfg.m_instrument;
    let scale = 10.0 * m_ca as f64;
    let mut z0 = Vec::with_capacity(n);
    let mut z1 = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let ca = &row[ca_start..ca_start + m_ca];
        let s0: f64 = theta_y0.iter().zip(ca).map(|(a, b)| a * b).sum();
        let s1: f64 = theta_y1.iter().zip(ca).map(|(a, b)| a * b * b).sum();
        z0.push(s0 / scale);
        z1.push(s1 / scale);
    }
    let y0 = threshold_positive(&z0);
    let y1 = threshold_positive(&z1);
    let y_f: Vec<f64> = t
        .iter()
        .zip(y0.iter().zip(&y1))
        .map(|(&ti, (&a, &b))| if ti == 1 { b } else { a })
        .collect();

    let mut roles = Vec::with_capacity(m);
    roles.extend(std::iter::repeat_n(VarRole::Instrument, cfg.m_instrument));
    roles.extend(std::iter::repeat_n(VarRole::Confounder, cfg.m_confounder));
    roles.extend(std::iter::repeat_n(VarRole::Adjustment, cfg.m_adjustment));
    roles.extend(std::iter::repeat_n(VarRole::Noise, cfg.m_noise));

    let mut ds = Dataset::new(x, n, m, t, y_f, Some(y0), Some(y1), OutcomeType::Binary)?;
    ds.roles = Some(roles);
    ds.synthetic_meta = Some(SyntheticMeta {
        config: cfg.clone(),
        theta_t,
        theta_y0,
        theta_y1,
    });
    Ok(ds)
}

// ── Splits ───────────────────────────────────────────────────────────

/// Train/validation/test fractions and the shuffling seed.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec {
            train: 0.63,
            valid: 0.27,
            test: 0.10,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.valid <= 0.0 || self.test <= 0.0 {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if (self.train + self.valid + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Index partition of a dataset.
#[derive(Debug, Clone)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Uniform random partition. Counts are floor(fraction * n) with the
/// remainder assigned to the training part.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n = ds.n();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);

    let n_valid = (spec.valid * n as f64).floor() as usize;
    let n_test = (spec.test * n as f64).floor() as usize;
    let n_train = n - n_valid - n_test;

    let train = idx[..n_train].to_vec();
    let valid = idx[n_train..n_train + n_valid].to_vec();
    let test = idx[n_train + n_valid..].to_vec();

    for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if part.len() < 2 {
            return Err(Error::Split(format!("{name} part has {} samples", part.len())));
        }
    }
    let treated = train.iter().filter(|&&i| ds.t[i] == 1).count();
    if treated == 0 || treated == train.len() {
        return Err(Error::Split("train part contains a single treatment arm".into()));
    }
    Ok(SplitIndices { train, valid, test })
}

// ── CSV interchange ──────────────────────────────────────────────────

fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta")
}

/// Write a dataset as CSV plus, when generator metadata is present, a
/// `.meta` sidecar.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (1..=ds.m()).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    header.push("yf".into());
    if ds.has_ground_truth() {
        header.push("y0".into());
        header.push("y1".into());
    }
    if ds.rct.is_some() {
        header.push("e".into());
    }
    wtr.write_record(&header).map_err(|e| csv_error(path, e))?;

    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        record.clear();
        record.extend(ds.x_row(i).iter().map(|v| v.to_string()));
        record.push(ds.t[i].to_string());
        record.push(ds.y_f[i].to_string());
        if let (Some(y0), Some(y1)) = (&ds.y0, &ds.y1) {
            record.push(y0[i].to_string());
            record.push(y1[i].to_string());
        }
        if let Some(rct) = &ds.rct {
            record.push(if rct[i] { "1".into() } else { "0".into() });
        }
        wtr.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush()?;

    write_meta(ds, &meta_path(path))?;
    Ok(())
}

fn write_meta(ds: &Dataset, path: &Path) -> Result<()> {
    let mut lines = String::new();
    if let Some(meta) = &ds.synthetic_meta {
        lines.push_str(&format!("m_I={}\n", meta.config.m_instrument));
        lines.push_str(&format!("m_C={}\n", meta.config.m_confounder));
        lines.push_str(&format!("m_A={}\n", meta.config.m_adjustment));
        lines.push_str(&format!("m_D={}\n", meta.config.m_noise));
        lines.push_str(&format!("n={}\n", meta.config.n));
        lines.push_str(&format!("seed={}\n", meta.config.seed));
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        lines.push_str(&format!("theta_t={}\n", join(&meta.theta_t)));
        lines.push_str(&format!("theta_y0={}\n", join(&meta.theta_y0)));
        lines.push_str(&format!("theta_y1={}\n", join(&meta.theta_y1)));
    }
    lines.push_str(&format!(
        "outcome_type={}\n",
        match ds.outcome_type {
            OutcomeType::Binary => "binary",
            OutcomeType::Continuous => "continuous",
        }
    ));
    if let Some(roles) = &ds.roles {
        let joined: Vec<&str> = roles.iter().map(|r| r.short()).collect();
        lines.push_str(&format!("roles={}\n", joined.join(",")));
    }
    if lines.is_empty() {
        return Ok(());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(lines.as_bytes())?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, .. } => pos.as_ref().map(|p| p.line() as usize),
        _ => e.position().map(|p| p.line() as usize),
    };
    Error::Parse {
        path: path.display().to_string(),
        row,
        msg: e.to_string(),
    }
}

/// Loader options.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Force the outcome type instead of inferring binary from the data.
    pub outcome_type: Option<OutcomeType>,
}

/// Read a dataset from CSV (schema `x1..xm,t,yf[,y0,y1][,e]`), picking up the
/// `.meta` sidecar when present.
pub fn load_csv(path: &Path, options: &LoadOptions) -> Result<Dataset> {
    let perr = |row: Option<usize>, msg: String| Error::Parse {
        path: path.display().to_string(),
        row,
        msg,
    };

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    // Covariate columns are the leading x1..xm run.
    let mut m = 0;
    while m < headers.len() && headers[m] == format!("x{}", m + 1) {
        m += 1;
    }
    if m == 0 {
        return Err(perr(Some(1), "header must start with x1".into()));
    }
    let rest: Vec<&str> = headers[m..].iter().map(|s| s.as_str()).collect();
    let (has_po, has_rct) = match rest.as_slice() {
        ["t", "yf"] => (false, false),
        ["t", "yf", "e"] => (false, true),
        ["t", "yf", "y0", "y1"] => (true, false),
        ["t", "yf", "y0", "y1", "e"] => (true, true),
        other => {
            return Err(perr(
                Some(1),
                format!("unsupported column layout after covariates: {other:?}"),
            ))
        }
    };
    let expected_len = headers.len();

    let mut x = Vec::new();
    let mut t = Vec::new();
    let mut y_f = Vec::new();
    let mut y0 = Vec::new();
    let mut y1 = Vec::new();
    let mut rct = Vec::new();

    for (i, record) in rdr.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != expected_len {
            return Err(perr(
                Some(line),
                format!("expected {expected_len} fields, got {}", record.len()),
            ));
        }
        let field = |j: usize| -> Result<f64> {
            record[j]
                .trim()
                .parse::<f64>()
                .map_err(|_| perr(Some(line), format!("non-numeric value {:?} in column {}", &record[j], headers[j])))
        };
        for j in 0..m {
            x.push(field(j)?);
        }
        let tv = field(m)?;
        if tv != 0.0 && tv != 1.0 {
            return Err(perr(Some(line), format!("treatment must be 0 or 1, got {tv}")));
        }
        t.push(tv as u8);
        y_f.push(field(m + 1)?);
        if has_po {
            y0.push(field(m + 2)?);
            y1.push(field(m + 3)?);
        }
        if has_rct {
            let ev = field(expected_len - 1)?;
            if ev != 0.0 && ev != 1.0 {
                return Err(perr(Some(line), format!("RCT flag must be 0 or 1, got {ev}")));
            }
            rct.push(ev == 1.0);
        }
    }

    let n = t.len();
    if n == 0 {
        return Err(perr(None, "no data rows".into()));
    }

    let outcome_type = options.outcome_type.unwrap_or_else(|| {
        if y_f.iter().all(|&v| v == 0.0 || v == 1.0) {
            OutcomeType::Binary
        } else {
            OutcomeType::Continuous
        }
    });

    let mut ds = Dataset::new(
        x,
        n,
        m,
        t,
        y_f,
        (!y0.is_empty()).then_some(y0),
        (!y1.is_empty()).then_some(y1),
        outcome_type,
    )?;
    if has_rct {
        ds.rct = Some(rct);
    }

    if let (Some(y0), Some(y1)) = (&ds.y0, &ds.y1) {
        // Ground-truth columns in public benchmarks are often noiseless
        // expectations while yf carries observation noise, so inconsistency
        // is reported but accepted.
        let consistent = ds
            .t
            .iter()
            .zip(ds.y_f.iter())
            .zip(y0.iter().zip(y1))
            .all(|((&ti, &yf), (&a, &b))| yf == if ti == 1 { b } else { a });
        if !consistent {
            log::warn!(
                "{}: yf differs from the potential outcome selected by t",
                path.display()
            );
        }
    }

    load_meta(&mut ds, &meta_path(path))?;
    Ok(ds)
}

fn load_meta(ds: &mut Dataset, path: &Path) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(()); // sidecar is optional
    };
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    if let Some(roles) = kv.get("roles") {
        let parsed: Option<Vec<VarRole>> = roles.split(',').map(|s| VarRole::parse(s.trim())).collect();
        match parsed {
            Some(r) if r.len() == ds.m() => ds.roles = Some(r),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row: None,
                    msg: "invalid roles list".into(),
                })
            }
        }
    }
    if let Some(ot) = kv.get("outcome_type") {
        ds.outcome_type = match ot.as_str() {
            "binary" => OutcomeType::Binary,
            "continuous" => OutcomeType::Continuous,
            other => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row: None,
                    msg: format!("unknown outcome_type {other:?}"),
                })
            }
        };
    }
    let parse_usize = |key: &str| kv.get(key).and_then(|v| v.parse::<usize>().ok());
    let parse_vec = |key: &str| -> Option<Vec<f64>> {
        kv.get(key)
            .map(|v| v.split(',').map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>())
            .and_then(|r| r.ok())
    };
    if let (Some(mi), Some(mc), Some(ma), Some(md), Some(n), Some(seed)) = (
        parse_usize("m_I"),
        parse_usize("m_C"),
        parse_usize("m_A"),
        parse_usize("m_D"),
        parse_usize("n"),
        kv.get("seed").and_then(|v| v.parse::<u64>().ok()),
    ) {
        if let (Some(theta_t), Some(theta_y0), Some(theta_y1)) =
            (parse_vec("theta_t"), parse_vec("theta_y0"), parse_vec("theta_y1"))
        {
            ds.synthetic_meta = Some(SyntheticMeta {
                config: SyntheticConfig {
                    m_instrument: mi,
                    m_confounder: mc,
                    m_adjustment: ma,
                    m_noise: md,
                    n,
                    seed,
                },
                theta_t,
                theta_y0,
                theta_y1,
            });
        }
    }
    Ok(())
}

// ── Twin-pair augmentation ───────────────────────────────────────────

/// Augment a twin-pair dataset: prepend ten binomial covariates, rescale
/// every covariate to [0, 1] by its column maximum, and reassign treatment by
/// a random logistic rule over the augmented covariates, restoring the
/// factual outcome from the stored potential outcomes.
pub fn augment_twins(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let (Some(y0), Some(y1)) = (&ds.y0, &ds.y1) else {
        return Err(Error::Contract(
            "twin augmentation needs both potential outcomes".into(),
        ));
    };
    let n = ds.n();
    let m_new = ds.m() + 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let binom = Binomial::new(5, 0.5).expect("valid binomial");
    let mut x = Vec::with_capacity(n * m_new);
    for i in 0..n {
        for _ in 0..10 {
            x.push(rng.sample(binom) as f64);
        }
        x.extend_from_slice(ds.x_row(i));
    }

    // Column max normalization; a zero maximum would divide out the column.
    for j in 0..m_new {
        let max = (0..n).map(|i| x[i * m_new + j]).fold(f64::NEG_INFINITY, f64::max);
        if max == 0.0 {
            log::warn!("column {} has zero maximum; normalization skipped", j + 1);
            continue;
        }
        for i in 0..n {
            x[i * m_new + j] /= max;
        }
    }

    let wdist = Uniform::new(-0.1, 0.1).expect("valid range");
    let w: Vec<f64> = (0..m_new).map(|_| rng.sample(wdist)).collect();
    // Noise variance 0.1.
    let noise_sd = 0.1f64.sqrt();
    let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * noise_sd).collect();

    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * m_new..(i + 1) * m_new];
        let s: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
        let p = sigmoid(s + noise[i]);
        debug_assert!(p > 0.0 && p < 1.0);
        t.push(u8::from(rng.random::<f64>() < p));
    }
    let y_f: Vec<f64> = t
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(&ti, (&a, &b))| if ti == 1 { b } else { a })
        .collect();

    let mut out = Dataset::new(x, n, m_new, t, y_f, Some(y0.clone()), Some(y1.clone()), ds.outcome_type)?;
    out.rct = ds.rct.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syn(mi: usize, mc: usize, ma: usize, n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig::new(mi, mc, ma, n, seed)).unwrap()
    }

    #[test]
    fn generator_dimensions() {
        let ds = syn(8, 8, 8, 3000, 1);
        assert_eq!(ds.n(), 3000);
        assert_eq!(ds.m(), 26);
        let ds = syn(16, 16, 16, 10_000, 1);
        assert_eq!(ds.m(), 50);
        assert_eq!(ds.x().len(), 10_000 * 50);
    }

    #[test]
    fn outcomes_are_binary_and_factual_consistent() {
        let ds = syn(4, 4, 4, 500, 7);
        let (y0, y1) = (ds.y0.as_ref().unwrap(), ds.y1.as_ref().unwrap());
        for i in 0..ds.n() {
            assert!(y0[i] == 0.0 || y0[i] == 1.0);
            assert!(y1[i] == 0.0 || y1[i] == 1.0);
            let expect = if ds.t[i] == 1 { y1[i] } else { y0[i] };
            assert_eq!(ds.y_f[i], expect);
        }
        assert_eq!(ds.outcome_type, OutcomeType::Binary);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = syn(3, 3, 3, 100, 42);
        let b = syn(3, 3, 3, 100, 42);
        assert_eq!(a.x(), b.x());
        assert_eq!(a.t, b.t);
        assert_eq!(a.y_f, b.y_f);
        let c = syn(3, 3, 3, 100, 43);
        assert_ne!(a.x(), c.x());
    }

    #[test]
    fn roles_partition_matches_blocks() {
        let ds = syn(2, 3, 4, 50, 9);
        let roles = ds.roles.as_ref().unwrap();
        assert_eq!(roles.len(), 11);
        assert!(roles[..2].iter().all(|r| *r == VarRole::Instrument));
        assert!(roles[2..5].iter().all(|r| *r == VarRole::Confounder));
        assert!(roles[5..9].iter().all(|r| *r == VarRole::Adjustment));
        assert!(roles[9..].iter().all(|r| *r == VarRole::Noise));
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(generate_synthetic(&SyntheticConfig::new(0, 8, 8, 3000, 1)).is_err());
        assert!(generate_synthetic(&SyntheticConfig::new(8, 8, 8, 9, 1)).is_err());
    }

    #[test]
    fn split_counts_and_cover() {
        let ds = syn(8, 8, 8, 3000, 5);
        let s = split(&ds, &SplitSpec::new(11)).unwrap();
        assert_eq!(s.train.len(), 1890);
        assert_eq!(s.valid.len(), 810);
        assert_eq!(s.test.len(), 300);

        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..3000).collect::<Vec<_>>());

        let again = split(&ds, &SplitSpec::new(11)).unwrap();
        assert_eq!(s.train, again.train);
        assert_eq!(s.test, again.test);
    }

    #[test]
    fn split_fraction_validation() {
        let ds = syn(2, 2, 2, 100, 5);
        let mut spec = SplitSpec::new(1);
        spec.train = 0.8;
        assert!(split(&ds, &spec).is_err());
        let spec = SplitSpec {
            train: 0.98,
            valid: 0.01,
            test: 0.01,
            seed: 1,
        };
        // 1 sample in valid/test parts
        assert!(split(&ds, &spec).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("dercfr-data-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.csv");
        let ds = syn(3, 3, 3, 60, 13);
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, &LoadOptions::default()).unwrap();
        assert_eq!(ds.x(), back.x());
        assert_eq!(ds.t, back.t);
        assert_eq!(ds.y_f, back.y_f);
        assert_eq!(ds.y0, back.y0);
        assert_eq!(ds.y1, back.y1);
        assert_eq!(ds.roles, back.roles);
        assert_eq!(back.outcome_type, OutcomeType::Binary);
        let meta = back.synthetic_meta.unwrap();
        assert_eq!(meta.theta_t, ds.synthetic_meta.as_ref().unwrap().theta_t);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loader_reports_bad_rows() {
        let dir = std::env::temp_dir().join(format!("dercfr-data-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "x1,x2,t,yf\n0.5,1.0,0,1\n0.5,oops,1,0\n").unwrap();
        let err = load_csv(&path, &LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "message was: {msg}");
        assert!(msg.contains("oops"));

        std::fs::write(&path, "x1,x2,t,yf\n0.5,1.0,0\n").unwrap();
        let err = load_csv(&path, &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("row 2"), "message was: {err}");

        std::fs::write(&path, "x1,x2,t,yf\n0.5,1.0,2,1\n").unwrap();
        assert!(load_csv(&path, &LoadOptions::default()).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loader_handles_benchmark_shapes() {
        // 747 units with 25 covariates, mirroring a common benchmark layout.
        let dir = std::env::temp_dir().join(format!("dercfr-data-ihdp-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bench.csv");
        let mut text = String::new();
        for j in 1..=25 {
            text.push_str(&format!("x{j},"));
        }
        text.push_str("t,yf,y0,y1\n");
        let mut state = 1u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for i in 0..747 {
            for _ in 0..25 {
                text.push_str(&format!("{},", next()));
            }
            let t = u8::from(i < 139);
            let y0 = next();
            let y1 = next();
            let yf = if t == 1 { y1 } else { y0 };
            text.push_str(&format!("{t},{yf},{y0},{y1}\n"));
        }
        std::fs::write(&path, text).unwrap();
        let ds = load_csv(&path, &LoadOptions::default()).unwrap();
        assert_eq!(ds.n(), 747);
        assert_eq!(ds.m(), 25);
        assert_eq!(ds.outcome_type, OutcomeType::Continuous);
        assert_eq!(ds.t.iter().filter(|&&t| t == 1).count(), 139);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn twins_augmentation_shapes_and_ranges() {
        // Build a discrete nonnegative base dataset with potential outcomes.
        let n = 400;
        let m = 28;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..n * m).map(|_| (rng.random::<u8>() % 7) as f64).collect();
        let y0: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
        let y1: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
        let t: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        let y_f: Vec<f64> = t
            .iter()
            .zip(y0.iter().zip(&y1))
            .map(|(&ti, (&a, &b))| if ti == 1 { b } else { a })
            .collect();
        let ds = Dataset::new(x, n, m, t, y_f, Some(y0), Some(y1), OutcomeType::Binary).unwrap();

        let aug = augment_twins(&ds, 77).unwrap();
        assert_eq!(aug.m(), 38);
        assert_eq!(aug.n(), n);
        for v in aug.x() {
            assert!((0.0..=1.0).contains(v), "covariate {v} outside [0,1]");
        }
        // Factual outcomes rebuilt from the reassigned treatment.
        let (y0, y1) = (aug.y0.as_ref().unwrap(), aug.y1.as_ref().unwrap());
        for i in 0..n {
            let expect = if aug.t[i] == 1 { y1[i] } else { y0[i] };
            assert_eq!(aug.y_f[i], expect);
        }
        // Both arms occur.
        assert!(aug.t.iter().any(|&t| t == 0) && aug.t.iter().any(|&t| t == 1));
    }

    #[test]
    fn treated_fraction_is_centered() {
        let ds = syn(8, 8, 8, 100_000, 2024);
        let frac = ds.t.iter().map(|&t| t as f64).sum::<f64>() / ds.n() as f64;
        assert!((0.45..=0.55).contains(&frac), "treated fraction {frac}");
    }

    #[test]
    fn subset_preserves_alignment() {
        let ds = syn(2, 2, 2, 100, 21);
        let idx = vec![5, 17, 3];
        let sub = ds.subset(&idx);
        assert_eq!(sub.n(), 3);
        assert_eq!(sub.x_row(1), ds.x_row(17));
        assert_eq!(sub.t[2], ds.t[3]);
        assert_eq!(sub.y_f[0], ds.y_f[5]);
    }
}
