//! The decomposed factor model: three representation networks, a treatment
//! head on the instrument representation, an outcome head on the adjustment
//! representation, two per-arm outcome heads on the confounder and adjustment
//! representations, and per-sample balancing weight pre-parameters.
//!
//! Parameters live in the model as plain vectors. For a training iteration
//! the model is *bound* onto a tape, which registers every parameter as a
//! differentiable leaf; for evaluation it is bound as constants and the same
//! forward code runs without recording.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::ad::{softplus_inverse, BatchStats, NodeId, Tape, Tensor};
use crate::data::SplitSpec;
use crate::error::{Error, Result};

/// Momentum of the exponential running average for batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.99;

const MODEL_MAGIC: &str = "DERCFR-MODEL-V1";

/// What the final layer of a network produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputKind {
    /// ELU-activated representation, optionally L2-normalized per row.
    Representation,
    /// Sigmoid probability.
    BinaryProb,
    /// Unbounded linear output.
    Linear,
}

/// Architecture of one multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Number of hidden layers; the network has `depth + 1` weight matrices.
    pub depth: usize,
    pub width: usize,
    pub output_dim: usize,
    pub batch_norm: bool,
    /// Representation networks only: scale each output row to unit norm.
    pub rep_normalize: bool,
}

impl NetworkSpec {
    fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("network depth must be >= 1".into()));
        }
        if self.input_dim < 1 || self.width < 1 || self.output_dim < 1 {
            return Err(Error::Config("network dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learned per-feature scale/shift plus frozen running statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `in_dim x out_dim`.
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BnLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: NetworkSpec,
    pub kind: OutputKind,
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    fn init(spec: NetworkSpec, kind: OutputKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut dims = Vec::with_capacity(spec.depth + 2);
        dims.push(spec.input_dim);
        for _ in 0..spec.depth {
            dims.push(spec.width);
        }
        dims.push(spec.output_dim);

        let mut layers = Vec::with_capacity(spec.depth + 1);
        for li in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[li], dims[li + 1]);
            let sd = (1.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * sd)
                .collect();
            let hidden = li < spec.depth;
            let bn = (hidden && spec.batch_norm).then(|| BnLayer {
                gamma: vec![1.0; fan_out],
                beta: vec![0.0; fan_out],
                running_mean: vec![0.0; fan_out],
                running_var: vec![1.0; fan_out],
            });
            layers.push(DenseLayer {
                in_dim: fan_in,
                out_dim: fan_out,
                w,
                bias: vec![0.0; fan_out],
                bn,
            });
        }
        Ok(Mlp { spec, kind, layers })
    }

    /// Weight matrices in layer order (used by the L2 penalty and the
    /// contribution product).
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }
}

/// How many leading weight matrices enter the contribution product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerCount {
    All,
    First(usize),
}

impl LayerCount {
    pub fn resolve(&self, total_layers: usize) -> Result<usize> {
        match *self {
            LayerCount::All => Ok(total_layers),
            LayerCount::First(0) => Err(Error::Config("layer count for contributions must be >= 1".into())),
            LayerCount::First(k) if k > total_layers => Err(Error::Config(format!(
                "layer count {k} exceeds the {total_layers} linear layers of the network"
            ))),
            LayerCount::First(k) => Ok(k),
        }
    }
}

impl std::fmt::Display for LayerCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerCount::All => f.write_str("all"),
            LayerCount::First(k) => write!(f, "{k}"),
        }
    }
}

/// Per-variable contribution mass on each representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContributionProfile {
    pub w_instrument: Vec<f64>,
    pub w_confounder: Vec<f64>,
    pub w_adjustment: Vec<f64>,
    pub layers_used: usize,
}

/// Dimensions and flags needed to assemble the seven networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output dimension of the representation networks (defaults to the
    /// representation hidden width).
    pub rep_dim: usize,
    pub rep_depth: usize,
    pub rep_width: usize,
    pub out_depth: usize,
    pub out_width: usize,
    pub treat_depth: usize,
    pub treat_width: usize,
    pub batch_norm: bool,
    pub rep_normalize: bool,
    pub binary_outcome: bool,
}

/// Provenance recorded with a trained model so evaluation can re-derive the
/// data split and the contribution settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub split: SplitSpec,
    pub layer_count: LayerCount,
}

/// The full model: seven networks plus balancing-weight pre-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeRCFRModel {
    pub rep_instrument: Mlp,
    pub rep_confounder: Mlp,
    pub rep_adjustment: Mlp,
    pub treat_head: Mlp,
    pub outcome_head_adj: Mlp,
    pub outcome_head0: Mlp,
    pub outcome_head1: Mlp,
    /// Pre-parameters of the per-training-sample weights; the weight itself
    /// is `softplus(rho)` and therefore always positive.
    pub rho: Vec<f64>,
    pub binary_outcome: bool,
    pub rep_dim: usize,
    pub train_meta: Option<TrainMeta>,
}

/// Build and initialize a model. Weights are zero-mean Gaussian with
/// standard deviation `sqrt(1 / fan_in)`, biases zero, and `rho` is set so
/// each sample's initial weight is `1 / n_arm` for its own treatment arm.
pub fn build_model(cfg: &ModelConfig, train_t: &[u8], seed: u64) -> Result<DeRCFRModel> {
    if cfg.input_dim < 1 {
        return Err(Error::Config("input dimension must be >= 1".into()));
    }
    let n = train_t.len();
    if n < 2 {
        return Err(Error::Config("need at least two training samples".into()));
    }
    let n1 = train_t.iter().filter(|&&t| t == 1).count();
    let n0 = n - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Config("each treatment arm needs at least one sample".into()));
    }

    let rep_spec = NetworkSpec {
        input_dim: cfg.input_dim,
        depth: cfg.rep_depth,
        width: cfg.rep_width,
        output_dim: cfg.rep_dim,
        batch_norm: cfg.batch_norm,
        rep_normalize: cfg.rep_normalize,
    };
    let treat_spec = NetworkSpec {
        input_dim: cfg.rep_dim,
        depth: cfg.treat_depth,
        width: cfg.treat_width,
        output_dim: 1,
        batch_norm: cfg.batch_norm,
        rep_normalize: false,
    };
    let out_adj_spec = NetworkSpec {
        input_dim: cfg.rep_dim,
        depth: cfg.out_depth,
        width: cfg.out_width,
        output_dim: 1,
        batch_norm: cfg.batch_norm,
        rep_normalize: false,
    };
    let out_spec = NetworkSpec {
        input_dim: 2 * cfg.rep_dim,
        depth: cfg.out_depth,
        width: cfg.out_width,
        output_dim: 1,
        batch_norm: cfg.batch_norm,
        rep_normalize: false,
    };

    let outcome_kind = if cfg.binary_outcome {
        OutputKind::BinaryProb
    } else {
        OutputKind::Linear
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rep_instrument = Mlp::init(rep_spec.clone(), OutputKind::Representation, &mut rng)?;
    let rep_confounder = Mlp::init(rep_spec.clone(), OutputKind::Representation, &mut rng)?;
    let rep_adjustment = Mlp::init(rep_spec, OutputKind::Representation, &mut rng)?;
    let treat_head = Mlp::init(treat_spec, OutputKind::BinaryProb, &mut rng)?;
    let outcome_head_adj = Mlp::init(out_adj_spec, outcome_kind, &mut rng)?;
    let outcome_head0 = Mlp::init(out_spec.clone(), outcome_kind, &mut rng)?;
    let outcome_head1 = Mlp::init(out_spec, outcome_kind, &mut rng)?;

    let rho = train_t
        .iter()
        .map(|&t| softplus_inverse(1.0 / if t == 1 { n1 } else { n0 } as f64))
        .collect();

    Ok(DeRCFRModel {
        rep_instrument,
        rep_confounder,
        rep_adjustment,
        treat_head,
        outcome_head_adj,
        outcome_head0,
        outcome_head1,
        rho,
        binary_outcome: cfg.binary_outcome,
        rep_dim: cfg.rep_dim,
        train_meta: None,
    })
}

impl DeRCFRModel {
    fn nets(&self) -> [&Mlp; 7] {
        [
            &self.rep_instrument,
            &self.rep_confounder,
            &self.rep_adjustment,
            &self.treat_head,
            &self.outcome_head_adj,
            &self.outcome_head0,
            &self.outcome_head1,
        ]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 7] {
        [
            &mut self.rep_instrument,
            &mut self.rep_confounder,
            &mut self.rep_adjustment,
            &mut self.treat_head,
            &mut self.outcome_head_adj,
            &mut self.outcome_head0,
            &mut self.outcome_head1,
        ]
    }

    /// Sizes of all trainable network parameter groups, in binding order:
    /// per network, per layer: weights, bias, then batch-norm scale and shift.
    pub fn network_param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for net in self.nets() {
            for layer in &net.layers {
                sizes.push(layer.w.len());
                sizes.push(layer.bias.len());
                if let Some(bn) = &layer.bn {
                    sizes.push(bn.gamma.len());
                    sizes.push(bn.beta.len());
                }
            }
        }
        sizes
    }

    /// Mutable views over the network parameter groups, in binding order.
    pub fn network_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for net in self.nets_mut() {
            for layer in &mut net.layers {
                out.push(&mut layer.w);
                out.push(&mut layer.bias);
                if let Some(bn) = &mut layer.bn {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
            }
        }
        out
    }

    /// Fold fresh batch statistics into the running ones.
    pub fn update_running_stats(&mut self, stats: &BnStatsBundle) {
        for (net, per_layer) in self.nets_mut().into_iter().zip(&stats.per_network) {
            let mut it = per_layer.iter();
            for layer in &mut net.layers {
                if let Some(bn) = &mut layer.bn {
                    let s = it.next().expect("one stats entry per batch-norm layer");
                    for j in 0..bn.running_mean.len() {
                        bn.running_mean[j] = BN_MOMENTUM * bn.running_mean[j] + (1.0 - BN_MOMENTUM) * s.mean[j];
                        bn.running_var[j] = BN_MOMENTUM * bn.running_var[j] + (1.0 - BN_MOMENTUM) * s.var[j];
                    }
                }
            }
        }
    }

    /// Save to a single self-describing file: a magic header line followed by
    /// the JSON body.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{MODEL_MAGIC}")?;
        serde_json::to_writer(&mut f, self).map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        let Some((header, body)) = text.split_once('\n') else {
            return Err(Error::Format("missing model header".into()));
        };
        if header.trim() != MODEL_MAGIC {
            return Err(Error::Format(format!(
                "unrecognized model header {:?}; expected {MODEL_MAGIC}",
                header.trim()
            )));
        }
        serde_json::from_str(body).map_err(|e| Error::Format(e.to_string()))
    }
}

// ── Tape binding ─────────────────────────────────────────────────────

pub struct BoundBn {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub struct BoundLayer {
    pub w: Tensor,
    pub bias: Tensor,
    pub bn: Option<BoundBn>,
}

pub struct BoundMlp {
    pub kind: OutputKind,
    pub rep_normalize: bool,
    pub layers: Vec<BoundLayer>,
}

/// Whether batch normalization uses current-batch or frozen statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

impl BoundMlp {
    fn bind(tape: &mut Tape, net: &Mlp, trainable: bool) -> Result<Self> {
        let mut layers = Vec::with_capacity(net.layers.len());
        for l in &net.layers {
            let mk = |tape: &mut Tape, rows: usize, cols: usize, vals: &[f64]| -> Result<Tensor> {
                Ok(if trainable {
                    tape.var(rows, cols, vals)?
                } else {
                    Tensor::constant(rows, cols, vals.to_vec())?
                })
            };
            let w = mk(tape, l.in_dim, l.out_dim, &l.w)?;
            let bias = mk(tape, 1, l.out_dim, &l.bias)?;
            let bn = match &l.bn {
                None => None,
                Some(bn) => Some(BoundBn {
                    gamma: mk(tape, 1, l.out_dim, &bn.gamma)?,
                    beta: mk(tape, 1, l.out_dim, &bn.beta)?,
                    running_mean: bn.running_mean.clone(),
                    running_var: bn.running_var.clone(),
                }),
            };
            layers.push(BoundLayer { w, bias, bn });
        }
        Ok(BoundMlp {
            kind: net.kind,
            rep_normalize: net.spec.rep_normalize,
            layers,
        })
    }

    /// Forward pass; returns the output and the batch statistics of every
    /// batch-norm layer (empty in eval mode).
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: BnMode) -> Result<(Tensor, Vec<BatchStats>)> {
        let mut h = x.clone();
        let mut stats = Vec::new();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            h = tape.linear(&h, &layer.w, &layer.bias)?;
            if let Some(bn) = &layer.bn {
                h = match mode {
                    BnMode::Train => {
                        let (out, s) = tape.batch_norm_train(&h, &bn.gamma, &bn.beta)?;
                        stats.push(s);
                        out
                    }
                    BnMode::Eval => {
                        tape.batch_norm_eval(&h, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var)?
                    }
                };
            }
            if li < last {
                h = tape.elu(&h)?;
            } else {
                match self.kind {
                    OutputKind::Representation => {
                        h = tape.elu(&h)?;
                        if self.rep_normalize {
                            h = tape.l2_normalize_rows(&h)?;
                        }
                    }
                    OutputKind::BinaryProb => h = tape.sigmoid_op(&h)?,
                    OutputKind::Linear => {}
                }
            }
        }
        Ok((h, stats))
    }

    /// Per-input-variable contribution: row means of the product of the
    /// elementwise-absolute weight matrices of the first `count` layers.
    pub fn contribution(&self, tape: &mut Tape, count: LayerCount) -> Result<Tensor> {
        let used = count.resolve(self.layers.len())?;
        let mut prod = tape.abs(&self.layers[0].w)?;
        for layer in &self.layers[1..used] {
            let aw = tape.abs(&layer.w)?;
            prod = tape.matmul(&prod, &aw)?;
        }
        let d = prod.cols();
        let averager = Tensor::filled(d, 1, 1.0 / d as f64);
        Ok(tape.matmul(&prod, &averager)?)
    }
}

/// Everything the rep networks and heads produce on one input matrix.
pub struct FullForward {
    pub rep_instrument: Tensor,
    pub rep_confounder: Tensor,
    pub rep_adjustment: Tensor,
    /// Treatment probability from the instrument representation, `n x 1`.
    pub t_hat: Tensor,
    /// Outcome prediction from the adjustment representation alone, `n x 1`.
    pub y_adj_hat: Tensor,
    pub y0_hat: Tensor,
    pub y1_hat: Tensor,
    pub bn_stats: BnStatsBundle,
}

/// Forward outputs needed by the training objective: the per-arm outcome
/// heads are applied only to their own arm's rows.
pub struct TrainForward {
    pub rep_instrument: Tensor,
    pub rep_confounder: Tensor,
    pub rep_adjustment: Tensor,
    pub t_hat: Tensor,
    pub y_adj_hat: Tensor,
    /// `[h0 over arm-0 rows, h1 over arm-1 rows]`, aligned with the arm index
    /// lists passed to `forward_training`.
    pub y_own: [Tensor; 2],
    pub bn_stats: BnStatsBundle,
}

/// Batch statistics grouped per network, in model binding order.
#[derive(Default)]
pub struct BnStatsBundle {
    pub per_network: [Vec<BatchStats>; 7],
}

pub struct BoundModel {
    pub rep_instrument: BoundMlp,
    pub rep_confounder: BoundMlp,
    pub rep_adjustment: BoundMlp,
    pub treat_head: BoundMlp,
    pub outcome_head_adj: BoundMlp,
    pub outcome_head0: BoundMlp,
    pub outcome_head1: BoundMlp,
    pub rho: Tensor,
}

impl BoundModel {
    /// Register the model on a tape. With `trainable` every parameter becomes
    /// a leaf; otherwise everything is constant and nothing is recorded.
    pub fn bind(tape: &mut Tape, model: &DeRCFRModel, trainable: bool) -> Result<Self> {
        let rho = if trainable {
            tape.var(model.rho.len(), 1, &model.rho)?
        } else {
            Tensor::constant(model.rho.len(), 1, model.rho.clone())?
        };
        Ok(BoundModel {
            rep_instrument: BoundMlp::bind(tape, &model.rep_instrument, trainable)?,
            rep_confounder: BoundMlp::bind(tape, &model.rep_confounder, trainable)?,
            rep_adjustment: BoundMlp::bind(tape, &model.rep_adjustment, trainable)?,
            treat_head: BoundMlp::bind(tape, &model.treat_head, trainable)?,
            outcome_head_adj: BoundMlp::bind(tape, &model.outcome_head_adj, trainable)?,
            outcome_head0: BoundMlp::bind(tape, &model.outcome_head0, trainable)?,
            outcome_head1: BoundMlp::bind(tape, &model.outcome_head1, trainable)?,
            rho,
        })
    }

    fn nets(&self) -> [&BoundMlp; 7] {
        [
            &self.rep_instrument,
            &self.rep_confounder,
            &self.rep_adjustment,
            &self.treat_head,
            &self.outcome_head_adj,
            &self.outcome_head0,
            &self.outcome_head1,
        ]
    }

    /// Network parameter tensors in the same order as
    /// [`DeRCFRModel::network_params_mut`].
    pub fn network_param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for net in self.nets() {
            for layer in &net.layers {
                out.push(&layer.w);
                out.push(&layer.bias);
                if let Some(bn) = &layer.bn {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
            }
        }
        out
    }

    /// Node ids of all network parameter leaves (empty when bound frozen).
    pub fn network_leaf_ids(&self) -> Vec<NodeId> {
        self.network_param_tensors()
            .iter()
            .filter_map(|t| t.node_id())
            .collect()
    }

    /// Weight-matrix tensors of all seven networks (no biases, no batch-norm
    /// parameters); the L2 penalty runs over exactly these.
    pub fn weight_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for net in self.nets() {
            for layer in &net.layers {
                out.push(&layer.w);
            }
        }
        out
    }

    /// Balancing weights `softplus(rho)`, `n x 1`, strictly positive.
    pub fn omega(&self, tape: &mut Tape) -> Result<Tensor> {
        Ok(tape.softplus_op(&self.rho)?)
    }

    /// Full forward pass over `x`: representations, treatment head, outcome
    /// heads on every row.
    pub fn forward_all(&self, tape: &mut Tape, x: &Tensor, mode: BnMode) -> Result<FullForward> {
        let mut bn_stats = BnStatsBundle::default();
        let (rep_i, s0) = self.rep_instrument.forward(tape, x, mode)?;
        let (rep_c, s1) = self.rep_confounder.forward(tape, x, mode)?;
        let (rep_a, s2) = self.rep_adjustment.forward(tape, x, mode)?;
        let (t_hat, s3) = self.treat_head.forward(tape, &rep_i, mode)?;
        let (y_adj_hat, s4) = self.outcome_head_adj.forward(tape, &rep_a, mode)?;
        let ca = tape.concat_cols(&rep_c, &rep_a)?;
        let (y0_hat, s5) = self.outcome_head0.forward(tape, &ca, mode)?;
        let (y1_hat, s6) = self.outcome_head1.forward(tape, &ca, mode)?;
        bn_stats.per_network = [s0, s1, s2, s3, s4, s5, s6];
        Ok(FullForward {
            rep_instrument: rep_i,
            rep_confounder: rep_c,
            rep_adjustment: rep_a,
            t_hat,
            y_adj_hat,
            y0_hat,
            y1_hat,
            bn_stats,
        })
    }

    /// Training forward pass: as [`BoundModel::forward_all`] but each per-arm
    /// outcome head only sees its own arm's rows.
    pub fn forward_training(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        arm0: &[usize],
        arm1: &[usize],
    ) -> Result<TrainForward> {
        let mode = BnMode::Train;
        let mut bn_stats = BnStatsBundle::default();
        let (rep_i, s0) = self.rep_instrument.forward(tape, x, mode)?;
        let (rep_c, s1) = self.rep_confounder.forward(tape, x, mode)?;
        let (rep_a, s2) = self.rep_adjustment.forward(tape, x, mode)?;
        let (t_hat, s3) = self.treat_head.forward(tape, &rep_i, mode)?;
        let (y_adj_hat, s4) = self.outcome_head_adj.forward(tape, &rep_a, mode)?;
        let ca = tape.concat_cols(&rep_c, &rep_a)?;
        let ca0 = tape.gather_rows(&ca, arm0)?;
        let ca1 = tape.gather_rows(&ca, arm1)?;
        let (y_own0, s5) = self.outcome_head0.forward(tape, &ca0, mode)?;
        let (y_own1, s6) = self.outcome_head1.forward(tape, &ca1, mode)?;
        bn_stats.per_network = [s0, s1, s2, s3, s4, s5, s6];
        Ok(TrainForward {
            rep_instrument: rep_i,
            rep_confounder: rep_c,
            rep_adjustment: rep_a,
            t_hat,
            y_adj_hat,
            y_own: [y_own0, y_own1],
            bn_stats,
        })
    }

    /// Contribution vectors of the three representation networks.
    pub fn contributions(&self, tape: &mut Tape, count: LayerCount) -> Result<[Tensor; 3]> {
        Ok([
            self.rep_instrument.contribution(tape, count)?,
            self.rep_confounder.contribution(tape, count)?,
            self.rep_adjustment.contribution(tape, count)?,
        ])
    }
}

/// Contribution profile of a trained model, computed outside any gradient
/// context.
pub fn contribution_profile(model: &DeRCFRModel, count: LayerCount) -> Result<ContributionProfile> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model, false)?;
    let [wi, wc, wa] = bound.contributions(&mut tape, count)?;
    let layers_used = count.resolve(model.rep_instrument.layers.len())?;
    Ok(ContributionProfile {
        w_instrument: wi.values().to_vec(),
        w_confounder: wc.values().to_vec(),
        w_adjustment: wa.values().to_vec(),
        layers_used,
    })
}
