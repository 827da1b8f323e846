//! Optimizers, training loops, and the sweep drivers that reproduce
//! the gamma/tau/rho/batch-size experiments at desk scale.
//!
//! Runs are deterministic: every random choice (init, shuffles, loss
//! probes, curvature probes) comes from a labeled substream of the run
//! seed, so identical configs give bit-identical records. Independent
//! runs inside a sweep execute in parallel and are assembled in
//! (axis value, seed) order regardless of completion order.

mod data;

pub use data::{generate_dataset, split_dataset, DatasetSpec, GeneratorId, SplitData};

use crate::autodiff::{self, DenseHvp, HvpOracle, NodeId, Tape};
use crate::calibration;
use crate::curvature::{
    hutchinson_trace, power_iteration_lambda_max, PowerIterResult, TraceEstimate,
};
use crate::error::{Error, Result};
use crate::models::{loss_node, loss_value, Activation, LabeledBatch, LossSpec, MlpModel};
use crate::numkit::{norm, RngStream};
use serde::{Deserialize, Serialize};
use std::io::Write;

const LBL_INIT: u64 = 1;
const LBL_STEP_PROBES: u64 = 2;
const LBL_SHUFFLE_BASE: u64 = 10_000;
const LBL_EVAL_BASE: u64 = 20_000_000;

/// Parameter-norm ceiling beyond which a run counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Hidden architecture; input and class widths come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("model.hidden", "zero hidden width"));
        }
        Ok(())
    }

    pub fn widths(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(classes);
        w
    }
}

/// SAM batch regime: which batch the ascent/descent pair sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamMode {
    /// Whole training set per step.
    Full,
    /// The configured mini-batch.
    Mini,
    /// One example per step.
    One,
}

/// Optimizer selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        eta: f64,
    },
    Momentum {
        eta: f64,
        #[serde(default = "default_momentum")]
        beta: f64,
    },
    Sam {
        eta: f64,
        rho: f64,
        mode: SamMode,
    },
}

fn default_momentum() -> f64 {
    0.9
}

impl OptimizerSpec {
    pub fn eta(&self) -> f64 {
        match self {
            OptimizerSpec::Sgd { eta }
            | OptimizerSpec::Momentum { eta, .. }
            | OptimizerSpec::Sam { eta, .. } => *eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta() <= 0.0 || !self.eta().is_finite() {
            return Err(Error::config("optimizer.eta", "learning rate must be > 0"));
        }
        match self {
            OptimizerSpec::Momentum { beta, .. } => {
                if !(0.0..1.0).contains(beta) {
                    return Err(Error::config("optimizer.beta", "momentum must lie in [0,1)"));
                }
            }
            OptimizerSpec::Sam { rho, .. } => {
                if *rho < 0.0 || !rho.is_finite() {
                    return Err(Error::config("optimizer.rho", "rho must be >= 0"));
                }
            }
            OptimizerSpec::Sgd { .. } => {}
        }
        Ok(())
    }
}

/// Batch size: a fixed size or the whole training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSpec {
    Full,
    Size(usize),
}

impl Serialize for BatchSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSpec::Full => s.serialize_str("full"),
            BatchSpec::Size(b) => s.serialize_u64(*b as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::String(s) if s == "full" => Ok(BatchSpec::Full),
            serde_json::Value::Number(n) => n
                .as_u64()
                .filter(|&b| b >= 1)
                .map(|b| BatchSpec::Size(b as usize))
                .ok_or_else(|| D::Error::custom("batch size must be a positive integer")),
            _ => Err(D::Error::custom(r#"expected a positive integer or "full""#)),
        }
    }
}

/// Curvature/calibration measurement cadence and budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Epochs to evaluate at; defaults to 25%, 50%, 100% of training.
    pub epochs: Option<Vec<usize>>,
    pub hutchinson_probes: usize,
    pub power_iters: usize,
    pub ece_bins: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            epochs: None,
            hutchinson_probes: 1000,
            power_iters: 200,
            ece_bins: calibration::DEFAULT_BINS,
        }
    }
}

/// Complete description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub optimizer: OptimizerSpec,
    pub batch_size: BatchSpec,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "need at least one epoch"));
        }
        if let BatchSpec::Size(0) = self.batch_size {
            return Err(Error::config("batch_size", "batch size must be >= 1"));
        }
        if let OptimizerSpec::Sam { mode, .. } = &self.optimizer {
            match (mode, self.batch_size) {
                (SamMode::Full, BatchSpec::Full) => {}
                (SamMode::Full, _) => {
                    return Err(Error::config(
                        "optimizer.mode",
                        r#"sam mode "full" requires batch_size "full""#,
                    ))
                }
                (SamMode::One, BatchSpec::Size(1)) => {}
                (SamMode::One, _) => {
                    return Err(Error::config(
                        "optimizer.mode",
                        r#"sam mode "one" requires batch_size 1"#,
                    ))
                }
                (SamMode::Mini, _) => {}
            }
        }
        if let Some(epochs) = &self.eval.epochs {
            if epochs.is_empty() {
                return Err(Error::config("eval.epochs", "eval epoch list is empty"));
            }
            if epochs.iter().any(|&e| e == 0 || e > self.epochs) {
                return Err(Error::config(
                    "eval.epochs",
                    "eval epochs must lie in [1, epochs]",
                ));
            }
        }
        if self.eval.hutchinson_probes == 0 {
            return Err(Error::config("eval.hutchinson_probes", "need >= 1 probe"));
        }
        if self.eval.power_iters == 0 {
            return Err(Error::config("eval.power_iters", "need >= 1 iteration"));
        }
        if self.eval.ece_bins == 0 {
            return Err(Error::config("eval.ece_bins", "need >= 1 bin"));
        }
        Ok(())
    }

    /// Sorted, deduplicated eval epochs (quartile defaults when unset).
    pub fn eval_epochs(&self) -> Vec<usize> {
        let mut out = match &self.eval.epochs {
            Some(e) => e.clone(),
            None => vec![
                (self.epochs / 4).max(1),
                (self.epochs / 2).max(1),
                self.epochs,
            ],
        };
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Per-eval metrics row. `eval_seed` reproduces every stochastic
/// estimate in the row (loss probes, curvature probes, power start).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_ece: f64,
    pub grad_norm: f64,
    pub trace: f64,
    pub trace_stderr: f64,
    pub lambda_max: f64,
    pub eval_seed: u64,
}

/// Eval rows in epoch order; `diverged` marks a truncated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EvalRow>,
    pub diverged: bool,
}

impl RunRecord {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for row in &self.rows {
            let line = serde_json::to_string(row)
                .map_err(|e| Error::Numerical(format!("serialize eval row: {e}")))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Record plus the final model state.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: MlpModel,
}

/// Mean loss and its gradient at the model's current parameters.
pub fn loss_and_gradient(
    model: &MlpModel,
    batch: &LabeledBatch,
    spec: &LossSpec,
    probes: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let theta: Vec<NodeId> = model.params().iter().map(|&v| tape.input(v)).collect();
    let out = loss_node(model, &mut tape, &theta, batch, spec, probes)?;
    tape.check_finite(out)?;
    Ok((tape.value(out), tape.backward(out, &theta)))
}

/// Plain gradient step `theta <- theta - eta g`.
pub fn sgd_update<G>(theta: &mut [f64], eta: f64, grad: G) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let g = grad(theta)?;
    for (t, gi) in theta.iter_mut().zip(&g) {
        *t -= eta * gi;
    }
    Ok(norm(&g))
}

/// Momentum step: `v <- beta v + g`, `theta <- theta - eta v`.
pub fn momentum_update<G>(
    theta: &mut [f64],
    velocity: &mut [f64],
    eta: f64,
    beta: f64,
    grad: G,
) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let g = grad(theta)?;
    for (v, gi) in velocity.iter_mut().zip(&g) {
        *v = beta * *v + gi;
    }
    for (t, v) in theta.iter_mut().zip(velocity.iter()) {
        *t -= eta * v;
    }
    Ok(norm(&g))
}

/// Ascent-descent step: perturb along the normalized gradient by `rho`,
/// then descend with the gradient taken at the perturbed point. A zero
/// gradient skips the perturbation, and `rho = 0` reduces to
/// [`sgd_update`] exactly.
pub fn sam_update<G>(theta: &mut [f64], eta: f64, rho: f64, grad: G) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let g1 = grad(theta)?;
    let n1 = norm(&g1);
    let g2 = if n1 > 0.0 && rho > 0.0 {
        let perturbed: Vec<f64> = theta
            .iter()
            .zip(&g1)
            .map(|(t, g)| t + rho / n1 * g)
            .collect();
        grad(&perturbed)?
    } else if n1 == 0.0 {
        // Stationary point: leave parameters untouched.
        return Ok(0.0);
    } else {
        g1.clone()
    };
    for (t, gi) in theta.iter_mut().zip(&g2) {
        *t -= eta * gi;
    }
    Ok(n1)
}

/// Curvature of `spec` on `batch` at the model's current parameters:
/// Hutchinson trace plus power-iteration dominant eigenvalue. When the
/// parameter count allows it the Hessian is materialized once and
/// probed densely; otherwise the estimators drive the implicit
/// reverse-over-reverse oracle.
pub fn curvature_estimates(
    model: &MlpModel,
    batch: &LabeledBatch,
    spec: &LossSpec,
    hutchinson_probes: usize,
    power_iters: usize,
    rng: &RngStream,
) -> Result<(TraceEstimate, PowerIterResult)> {
    let builder = |tape: &mut Tape, theta: &[NodeId]| {
        loss_node(model, tape, theta, batch, spec, &[]).expect("loss graph")
    };
    let mut trace_rng = rng.substream(1);
    let mut power_rng = rng.substream(2);
    if model.param_count() <= autodiff::DENSE_HESSIAN_CAP {
        let h = autodiff::exact_hessian(builder, model.params())?;
        let mut oracle = DenseHvp::new(h)?;
        let trace = hutchinson_trace(&mut oracle, hutchinson_probes, &mut trace_rng)?;
        let power = power_iteration_lambda_max(&mut oracle, power_iters, 1e-10, &mut power_rng)?;
        Ok((trace, power))
    } else {
        let mut oracle = HvpOracle::new(builder, model.params())?;
        let trace = hutchinson_trace(&mut oracle, hutchinson_probes, &mut trace_rng)?;
        let power = power_iteration_lambda_max(&mut oracle, power_iters, 1e-10, &mut power_rng)?;
        Ok((trace, power))
    }
}

/// Loss whose validation Hessian the record tracks: the training
/// objective itself, except that the trace-penalized objective reports
/// the curvature of its cross-entropy base.
fn curvature_target(spec: &LossSpec) -> LossSpec {
    match spec {
        LossSpec::Focal { gamma } => LossSpec::Focal { gamma: *gamma },
        _ => LossSpec::CrossEntropy,
    }
}

fn probes_for_step(
    spec: &LossSpec,
    dim: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    (0..spec.probes_needed())
        .map(|_| rng.rademacher(dim))
        .collect()
}

/// Trains a fresh model and reports metrics at the eval epochs.
/// Divergence (non-finite loss or runaway parameters) truncates the
/// record and sets the flag instead of erroring.
pub fn train_run(
    cfg: &TrainConfig,
    model_spec: &ModelSpec,
    data: &SplitData,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_spec.validate()?;
    let widths = model_spec.widths(data.train.inputs().cols(), data.train.classes());
    let root = RngStream::new(cfg.seed);
    let mut model =
        MlpModel::with_random_init(&widths, model_spec.activation, &mut root.substream(LBL_INIT))?;
    let mut velocity = vec![0.0; model.param_count()];
    let mut step_probe_rng = root.substream(LBL_STEP_PROBES);

    let n_train = data.train.n();
    let eval_epochs = cfg.eval_epochs();
    let mut rows = Vec::new();
    let mut diverged = false;

    'training: for epoch in 1..=cfg.epochs {
        let batches: Vec<Vec<usize>> = match (&cfg.optimizer, cfg.batch_size) {
            (OptimizerSpec::Sam { mode: SamMode::Full, .. }, _) | (_, BatchSpec::Full) => {
                vec![(0..n_train).collect()]
            }
            (_, BatchSpec::Size(b)) => {
                let mut order: Vec<usize> = (0..n_train).collect();
                root.substream(LBL_SHUFFLE_BASE + epoch as u64)
                    .shuffle(&mut order);
                order.chunks(b.min(n_train)).map(|c| c.to_vec()).collect()
            }
        };

        for indices in &batches {
            let batch = data.train.subset(indices)?;
            let probes = probes_for_step(&cfg.loss, model.param_count(), &mut step_probe_rng)?;
            let grad_fn = |theta: &[f64]| -> Result<Vec<f64>> {
                let mut probe_model = model.clone();
                probe_model.set_params(theta)?;
                loss_and_gradient(&probe_model, &batch, &cfg.loss, &probes).map(|(_, g)| g)
            };
            // The gradient closure reads a parameter clone, so the
            // update below can write back through the model.
            let mut theta = model.params().to_vec();
            let step = match &cfg.optimizer {
                OptimizerSpec::Sgd { eta } => sgd_update(&mut theta, *eta, grad_fn),
                OptimizerSpec::Momentum { eta, beta } => {
                    momentum_update(&mut theta, &mut velocity, *eta, *beta, grad_fn)
                }
                OptimizerSpec::Sam { eta, rho, .. } => sam_update(&mut theta, *eta, *rho, grad_fn),
            };
            if step.is_ok() {
                model.set_params(&theta)?;
            }
            match step {
                Ok(_) => {}
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break 'training;
                }
                Err(e) => return Err(e),
            }
            if norm(model.params()) > DIVERGENCE_NORM {
                diverged = true;
                break 'training;
            }
        }

        if eval_epochs.contains(&epoch) {
            let eval_seed = root.substream(LBL_EVAL_BASE + epoch as u64).seed();
            match eval_once(cfg, &model, data, epoch, eval_seed) {
                Ok(row) => rows.push(row),
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break 'training;
                }
                Err(e) => return Err(e),
            }
        }
    }

    Ok(TrainOutcome {
        record: RunRecord { rows, diverged },
        model,
    })
}

/// One metrics row at the current parameters; fully determined by
/// `eval_seed`, which the row records.
pub fn eval_once(
    cfg: &TrainConfig,
    model: &MlpModel,
    data: &SplitData,
    epoch: usize,
    eval_seed: u64,
) -> Result<EvalRow> {
    let eval_root = RngStream::new(eval_seed);
    let mut train_probe_rng = eval_root.substream(1);
    let mut val_probe_rng = eval_root.substream(2);
    let mut grad_probe_rng = eval_root.substream(3);
    let curvature_rng = eval_root.substream(4);

    let train_loss = loss_value(model, &data.train, &cfg.loss, Some(&mut train_probe_rng))?;
    let val_loss = loss_value(model, &data.val, &cfg.loss, Some(&mut val_probe_rng))?;
    let probs = model.forward_probs(data.val.inputs())?;
    let val_report = calibration::ece(&probs, data.val.labels(), cfg.eval.ece_bins)?;

    let probes = probes_for_step(&cfg.loss, model.param_count(), &mut grad_probe_rng)?;
    let (_, grad) = loss_and_gradient(model, &data.train, &cfg.loss, &probes)?;

    let target = curvature_target(&cfg.loss);
    let (trace, power) = curvature_estimates(
        model,
        &data.val,
        &target,
        cfg.eval.hutchinson_probes,
        cfg.eval.power_iters,
        &curvature_rng,
    )?;

    Ok(EvalRow {
        epoch,
        train_loss,
        val_loss,
        val_acc: val_report.accuracy,
        val_ece: val_report.ece,
        grad_norm: norm(&grad),
        trace: trace.estimate,
        trace_stderr: trace.stderr,
        lambda_max: power.lambda,
        eval_seed,
    })
}

/// Sweep axis: which knob varies and over which values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AxisSpec {
    Gamma { values: Vec<f64> },
    Tau { values: Vec<f64> },
    Rho { values: Vec<f64> },
    Batch { values: Vec<usize> },
}

impl AxisSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AxisSpec::Gamma { .. } => "gamma",
            AxisSpec::Tau { .. } => "tau",
            AxisSpec::Rho { .. } => "rho",
            AxisSpec::Batch { .. } => "batch",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            AxisSpec::Gamma { values } | AxisSpec::Tau { values } | AxisSpec::Rho { values } => {
                values.clone()
            }
            AxisSpec::Batch { values } => values.iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values().is_empty() {
            return Err(Error::config("axis.values", "axis value list is empty"));
        }
        match self {
            AxisSpec::Gamma { values } if values.iter().any(|&g| g < 0.0) => {
                Err(Error::config("axis.values", "gamma values must be >= 0"))
            }
            AxisSpec::Tau { values } if values.iter().any(|&t| t < 0.0) => {
                Err(Error::config("axis.values", "tau values must be >= 0"))
            }
            AxisSpec::Rho { values } if values.iter().any(|&r| r < 0.0) => {
                Err(Error::config("axis.values", "rho values must be >= 0"))
            }
            AxisSpec::Batch { values } if values.iter().any(|&b| b == 0) => {
                Err(Error::config("axis.values", "batch sizes must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Instantiates the template at one axis value.
    pub fn apply(&self, template: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = template.clone();
        match self {
            AxisSpec::Gamma { .. } => cfg.loss = LossSpec::Focal { gamma: value },
            AxisSpec::Tau { .. } => {
                let probes = match template.loss {
                    LossSpec::TraceReg { probes, .. } => probes,
                    _ => 1,
                };
                cfg.loss = LossSpec::TraceReg { tau: value, probes };
            }
            AxisSpec::Rho { .. } => match &template.optimizer {
                OptimizerSpec::Sam { eta, mode, .. } => {
                    cfg.optimizer = OptimizerSpec::Sam {
                        eta: *eta,
                        rho: value,
                        mode: *mode,
                    }
                }
                _ => {
                    return Err(Error::config(
                        "axis.kind",
                        "rho axis needs a sam optimizer template",
                    ))
                }
            },
            AxisSpec::Batch { .. } => cfg.batch_size = BatchSpec::Size(value as usize),
        }
        Ok(cfg)
    }
}

/// One sweep result row (final-epoch metrics of one run).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_ece: f64,
    pub grad_norm: f64,
    pub trace: f64,
    pub trace_stderr: f64,
    pub lambda_max: f64,
    pub diverged: bool,
}

/// Medians across seeds at one axis value, diverged runs excluded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateRow {
    pub axis: String,
    pub value: f64,
    pub runs: usize,
    pub diverged: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_ece: f64,
    pub grad_norm: f64,
    pub trace: f64,
    pub lambda_max: f64,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<AggregateRow>,
}

pub const SWEEP_CSV_HEADER: &str =
    "axis,value,seed,epoch,train_loss,val_loss,val_acc,val_ece,grad_norm,trace,trace_stderr,lambda_max,diverged";

pub const AGGREGATE_CSV_HEADER: &str =
    "axis,value,runs,diverged,train_loss,val_loss,val_acc,val_ece,grad_norm,trace,lambda_max";

impl SweepTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{SWEEP_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.axis,
                r.value,
                r.seed,
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.val_acc,
                r.val_ece,
                r.grad_norm,
                r.trace,
                r.trace_stderr,
                r.lambda_max,
                if r.diverged { 1 } else { 0 }
            )?;
        }
        Ok(())
    }

    pub fn write_aggregate_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{AGGREGATE_CSV_HEADER}")?;
        for r in &self.aggregates {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.axis,
                r.value,
                r.runs,
                r.diverged,
                r.train_loss,
                r.val_loss,
                r.val_acc,
                r.val_ece,
                r.grad_norm,
                r.trace,
                r.lambda_max
            )?;
        }
        Ok(())
    }
}

fn median(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs the template across `axis x seeds` (in parallel) and assembles
/// per-run final metrics plus per-value medians.
pub fn sweep(
    template: &TrainConfig,
    model_spec: &ModelSpec,
    dataset: &DatasetSpec,
    axis: &AxisSpec,
    seeds: &[u64],
) -> Result<SweepTable> {
    axis.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "seed list is empty"));
    }
    dataset.validate()?;
    model_spec.validate()?;
    let full = generate_dataset(dataset)?;
    let data = split_dataset(&full, dataset.seed)?;

    let mut jobs = Vec::new();
    for &value in &axis.values() {
        for &seed in seeds {
            jobs.push((value, seed));
        }
    }
    for (value, _) in &jobs {
        // Validate every instantiation up front so a bad template fails
        // fast rather than mid-sweep.
        axis.apply(template, *value)?.validate()?;
    }

    use rayon::prelude::*;
    let results: Vec<Result<SweepRow>> = jobs
        .par_iter()
        .map(|&(value, seed)| {
            let mut cfg = axis.apply(template, value)?;
            cfg.seed = seed;
            let outcome = train_run(&cfg, model_spec, &data)?;
            let last = outcome.record.rows.last();
            Ok(SweepRow {
                axis: axis.name().to_string(),
                value,
                seed,
                epoch: last.map_or(0, |r| r.epoch),
                train_loss: last.map_or(f64::NAN, |r| r.train_loss),
                val_loss: last.map_or(f64::NAN, |r| r.val_loss),
                val_acc: last.map_or(f64::NAN, |r| r.val_acc),
                val_ece: last.map_or(f64::NAN, |r| r.val_ece),
                grad_norm: last.map_or(f64::NAN, |r| r.grad_norm),
                trace: last.map_or(f64::NAN, |r| r.trace),
                trace_stderr: last.map_or(f64::NAN, |r| r.trace_stderr),
                lambda_max: last.map_or(f64::NAN, |r| r.lambda_max),
                diverged: outcome.record.diverged,
            })
        })
        .collect();
    let rows: Vec<SweepRow> = results.into_iter().collect::<Result<_>>()?;

    let mut aggregates = Vec::new();
    for &value in &axis.values() {
        let group: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.value == value)
            .collect();
        let healthy: Vec<&&SweepRow> = group.iter().filter(|r| !r.diverged).collect();
        let diverged = group.len() - healthy.len();
        let pick = |f: fn(&SweepRow) -> f64| -> f64 {
            let mut vals: Vec<f64> = healthy.iter().map(|r| f(r)).collect();
            median(&mut vals)
        };
        aggregates.push(AggregateRow {
            axis: axis.name().to_string(),
            value,
            runs: group.len(),
            diverged,
            train_loss: pick(|r| r.train_loss),
            val_loss: pick(|r| r.val_loss),
            val_acc: pick(|r| r.val_acc),
            val_ece: pick(|r| r.val_ece),
            grad_norm: pick(|r| r.grad_norm),
            trace: pick(|r| r.trace),
            lambda_max: pick(|r| r.lambda_max),
        });
    }

    Ok(SweepTable { rows, aggregates })
}
