//! Classification objectives: cross-entropy, focal loss, entropy terms,
//! the focal lower bound, the pointwise focal gradient with its limit
//! behavior, and the trace-penalized loss.
//!
//! Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before
//! logs and before `(1-p)^gamma`; the limits of both expressions justify
//! resolving `0 * inf` to zero there.

use super::{LabeledBatch, MlpModel};
use crate::autodiff::{hessian_quadratic_form_nodes, NodeId, Tape, LN_GUARD};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};
use serde::{Deserialize, Serialize};

/// Two-sided probability clamp used inside every loss.
pub const PROB_CLAMP: f64 = LN_GUARD;

/// Training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    /// Plain cross-entropy.
    #[serde(rename = "ce")]
    CrossEntropy,
    /// Focal loss with focusing parameter `gamma >= 0`.
    Focal { gamma: f64 },
    /// Cross-entropy plus `tau` times a Hutchinson estimate of the
    /// cross-entropy Hessian trace, with `probes` probe vectors.
    TraceReg { tau: f64, probes: usize },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::CrossEntropy => Ok(()),
            LossSpec::Focal { gamma } => {
                if *gamma < 0.0 || !gamma.is_finite() {
                    Err(Error::config("loss.gamma", "gamma must be >= 0"))
                } else {
                    Ok(())
                }
            }
            LossSpec::TraceReg { tau, probes } => {
                if *tau < 0.0 || !tau.is_finite() {
                    Err(Error::config("loss.tau", "tau must be >= 0"))
                } else if *probes == 0 {
                    Err(Error::config("loss.probes", "probe count must be >= 1"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Number of Rademacher probes a step must supply.
    pub fn probes_needed(&self) -> usize {
        match self {
            LossSpec::TraceReg { tau, probes } if *tau != 0.0 => *probes,
            _ => 0,
        }
    }
}

/// One-hot target matrix from integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} outside [0, {classes})"
            )));
        }
        m.set(i, y, 1.0);
    }
    Ok(m)
}

fn check_rows_stochastic(m: &Matrix, what: &str) -> Result<()> {
    for i in 0..m.rows() {
        let s: f64 = m.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 || m.row(i).iter().any(|&p| p < -1e-12) {
            return Err(Error::InvalidArgument(format!(
                "{what} row {i} is not stochastic (sum {s})"
            )));
        }
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean over samples of `-sum_y q(y) ln p(y)`. Probabilities at zero on
/// a supported class are clamped; the event is logged.
pub fn cross_entropy(probs: &Matrix, targets: &Matrix) -> Result<f64> {
    if probs.rows() != targets.rows() || probs.cols() != targets.cols() {
        return Err(Error::Shape("probs/targets shape mismatch".into()));
    }
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_rows_stochastic(probs, "probs")?;
    check_rows_stochastic(targets, "targets")?;
    let mut total = 0.0;
    let mut clamped = 0usize;
    for i in 0..probs.rows() {
        for j in 0..probs.cols() {
            let q = targets.get(i, j);
            if q == 0.0 {
                continue;
            }
            let p = probs.get(i, j);
            if p < PROB_CLAMP {
                clamped += 1;
            }
            total -= q * clamp_prob(p).ln();
        }
    }
    if clamped > 0 {
        log::warn!("cross_entropy clamped {clamped} probabilities below {PROB_CLAMP:e}");
    }
    Ok(total / probs.rows() as f64)
}

/// Mean over samples of `-sum_y (1-p)^gamma q ln p`.
pub fn focal_loss(probs: &Matrix, targets: &Matrix, gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::InvalidArgument("gamma must be >= 0".into()));
    }
    if probs.rows() != targets.rows() || probs.cols() != targets.cols() {
        return Err(Error::Shape("probs/targets shape mismatch".into()));
    }
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_rows_stochastic(probs, "probs")?;
    check_rows_stochastic(targets, "targets")?;
    let mut total = 0.0;
    for i in 0..probs.rows() {
        for j in 0..probs.cols() {
            let q = targets.get(i, j);
            if q == 0.0 {
                continue;
            }
            let p = clamp_prob(probs.get(i, j));
            total -= (1.0 - p).powf(gamma) * q * p.ln();
        }
    }
    Ok(total / probs.rows() as f64)
}

/// Mean over samples of `-sum_y p ln p`; lies in `[0, ln C]`.
pub fn conditional_entropy(probs: &Matrix) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_rows_stochastic(probs, "probs")?;
    let mut total = 0.0;
    for i in 0..probs.rows() {
        for j in 0..probs.cols() {
            let p = clamp_prob(probs.get(i, j));
            total -= p * p.ln();
        }
    }
    Ok(total / probs.rows() as f64)
}

/// `focal - (cross_entropy - gamma * conditional_entropy)`.
///
/// The inequality `gap >= 0` is asserted only for `gamma >= 1`, where
/// the Bernoulli step in its derivation points the right way; for
/// smaller gamma the value is still returned, unasserted.
pub fn focal_lower_bound_gap(probs: &Matrix, targets: &Matrix, gamma: f64) -> Result<f64> {
    let fl = focal_loss(probs, targets, gamma)?;
    let ce = cross_entropy(probs, targets)?;
    let h = conditional_entropy(probs)?;
    Ok(fl - (ce - gamma * h))
}

/// Pointwise focal gradient
/// `g(p, gamma) = (1-p)^gamma (gamma p (1-p)^{gamma-1} - (1-p)^gamma ln p)`.
///
/// Left-hand limits as `p -> 1`: 0 when `gamma = 0` or `gamma > 0.5`,
/// 0.5 when `gamma = 0.5`, and divergence to `+inf` for
/// `0 < gamma < 0.5`. See [`focal_pointwise_gradient_plain`] for the
/// ordinary derivative of the pointwise focal term, which differs.
pub fn focal_pointwise_gradient(p: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "p must lie strictly inside (0,1), got {p}"
        )));
    }
    if gamma < 0.0 {
        return Err(Error::InvalidArgument("gamma must be >= 0".into()));
    }
    let om = 1.0 - p;
    let inner = if gamma == 0.0 {
        -om.powf(gamma) * p.ln()
    } else {
        gamma * p * om.powf(gamma - 1.0) - om.powf(gamma) * p.ln()
    };
    Ok(om.powf(gamma) * inner)
}

/// Ordinary derivative `d/dp [-(1-p)^gamma ln p]`, for comparison with
/// [`focal_pointwise_gradient`].
pub fn focal_pointwise_gradient_plain(p: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "p must lie strictly inside (0,1), got {p}"
        )));
    }
    if gamma < 0.0 {
        return Err(Error::InvalidArgument("gamma must be >= 0".into()));
    }
    let om = 1.0 - p;
    let first = if gamma == 0.0 {
        0.0
    } else {
        gamma * om.powf(gamma - 1.0) * p.ln()
    };
    Ok(first - om.powf(gamma) / p)
}

/// Multiplier `(1-p0)^gamma` on the quadratic term of the loss
/// expansion around a fit with true-class probability `p0`.
pub fn focal_curvature_scale(p0: f64, gamma: f64) -> f64 {
    (1.0 - p0.clamp(0.0, 1.0)).powf(gamma)
}

/// Builds the mean loss over `batch` on the tape. `probes` must hold
/// `spec.probes_needed()` Rademacher vectors of parameter dimension.
///
/// `Focal { gamma: 0 }` and `TraceReg { tau: 0 }` build the identical
/// cross-entropy graph, so runs that only differ by those zeros stay
/// bit-for-bit reproducible against plain cross-entropy.
pub fn loss_node(
    model: &MlpModel,
    tape: &mut Tape,
    theta: &[NodeId],
    batch: &LabeledBatch,
    spec: &LossSpec,
    probes: &[Vec<f64>],
) -> Result<NodeId> {
    if theta.len() != model.param_count() {
        return Err(Error::Shape(format!(
            "model has {} parameters, theta nodes {}",
            model.param_count(),
            theta.len()
        )));
    }
    if batch.classes() != model.classes() || batch.inputs().cols() != model.input_dim() {
        return Err(Error::Shape("batch does not match model".into()));
    }
    if batch.n() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    spec.validate().map_err(|e| {
        Error::InvalidArgument(format!("invalid loss spec: {e}"))
    })?;

    match spec {
        LossSpec::CrossEntropy => ce_node(model, tape, theta, batch),
        LossSpec::Focal { gamma } if *gamma == 0.0 => ce_node(model, tape, theta, batch),
        LossSpec::Focal { gamma } => focal_node(model, tape, theta, batch, *gamma),
        LossSpec::TraceReg { tau, .. } if *tau == 0.0 => ce_node(model, tape, theta, batch),
        LossSpec::TraceReg { tau, probes: m } => {
            if probes.len() != *m {
                return Err(Error::InvalidArgument(format!(
                    "trace penalty needs {m} probes, got {}",
                    probes.len()
                )));
            }
            let ce = ce_node(model, tape, theta, batch)?;
            let qforms = hessian_quadratic_form_nodes(tape, ce, theta, probes);
            let total = tape.sum(&qforms);
            let mean = tape.mul_const(total, 1.0 / *m as f64);
            let penalty = tape.mul_const(mean, *tau);
            Ok(tape.add(ce, penalty))
        }
    }
}

/// Per-sample log-sum-exp of the logits, with max subtraction.
fn lse_node(tape: &mut Tape, logits: &[NodeId]) -> NodeId {
    let mut m = logits[0];
    for &z in &logits[1..] {
        m = tape.max(m, z);
    }
    let exps: Vec<NodeId> = logits
        .iter()
        .map(|&z| {
            let shifted = tape.sub(z, m);
            tape.exp(shifted)
        })
        .collect();
    let sum = tape.sum(&exps);
    let ln = tape.ln(sum);
    tape.add(m, ln)
}

fn ce_node(
    model: &MlpModel,
    tape: &mut Tape,
    theta: &[NodeId],
    batch: &LabeledBatch,
) -> Result<NodeId> {
    let soft = batch.soft_targets();
    let mut per_sample = Vec::with_capacity(batch.n());
    for i in 0..batch.n() {
        let logits = model.logits_node(tape, theta, batch.inputs().row(i));
        let lse = lse_node(tape, &logits);
        let term = match soft {
            None => tape.sub(lse, logits[batch.labels()[i]]),
            Some(t) => {
                let mut parts = Vec::new();
                for (y, &z) in logits.iter().enumerate() {
                    let q = t.get(i, y);
                    if q == 0.0 {
                        continue;
                    }
                    let nll = tape.sub(lse, z);
                    parts.push(tape.mul_const(nll, q));
                }
                tape.sum(&parts)
            }
        };
        per_sample.push(term);
    }
    let total = tape.sum(&per_sample);
    Ok(tape.mul_const(total, 1.0 / batch.n() as f64))
}

fn focal_node(
    model: &MlpModel,
    tape: &mut Tape,
    theta: &[NodeId],
    batch: &LabeledBatch,
    gamma: f64,
) -> Result<NodeId> {
    let soft = batch.soft_targets().cloned();
    let mut per_sample = Vec::with_capacity(batch.n());
    for i in 0..batch.n() {
        let logits = model.logits_node(tape, theta, batch.inputs().row(i));
        let lse = lse_node(tape, &logits);
        let mut parts = Vec::new();
        let term_for = |tape: &mut Tape, y: usize, q: f64| {
            let shifted = tape.sub(logits[y], lse);
            let p = tape.exp(shifted);
            let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let one = tape.constant(1.0);
            let om = tape.sub(one, pc);
            let w = tape.powc(om, gamma);
            let lnp = tape.ln(pc);
            let nll = tape.neg(lnp);
            let weighted = tape.mul(w, nll);
            if q == 1.0 {
                weighted
            } else {
                tape.mul_const(weighted, q)
            }
        };
        let term = match &soft {
            None => term_for(tape, batch.labels()[i], 1.0),
            Some(t) => {
                for (y, q) in (0..model.classes()).map(|y| (y, t.get(i, y))) {
                    if q == 0.0 {
                        continue;
                    }
                    let node = term_for(tape, y, q);
                    parts.push(node);
                }
                tape.sum(&parts)
            }
        };
        per_sample.push(term);
    }
    let total = tape.sum(&per_sample);
    Ok(tape.mul_const(total, 1.0 / batch.n() as f64))
}

/// Loss value via the tape (the same function the gradients see).
/// `probe_rng` supplies Rademacher probes when the spec needs them.
pub fn loss_value(
    model: &MlpModel,
    batch: &LabeledBatch,
    spec: &LossSpec,
    probe_rng: Option<&mut RngStream>,
) -> Result<f64> {
    let needed = spec.probes_needed();
    let probes = match (needed, probe_rng) {
        (0, _) => Vec::new(),
        (m, Some(rng)) => (0..m)
            .map(|_| rng.rademacher(model.param_count()))
            .collect::<Result<Vec<_>>>()?,
        (_, None) => {
            return Err(Error::InvalidArgument(
                "trace-regularized loss needs a probe rng".into(),
            ))
        }
    };
    let mut tape = Tape::new();
    let theta: Vec<NodeId> = model.params().iter().map(|&v| tape.input(v)).collect();
    let out = loss_node(model, &mut tape, &theta, batch, spec, &probes)?;
    tape.check_finite(out)?;
    Ok(tape.value(out))
}

/// Cross-entropy plus `tau * (1/M) sum_i v_i^T H v_i` with fresh
/// Rademacher probes from `rng`; `H` is the Hessian of the mean batch
/// cross-entropy in the parameters.
pub fn trace_regularized_loss(
    model: &MlpModel,
    batch: &LabeledBatch,
    tau: f64,
    m: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let spec = LossSpec::TraceReg { tau, probes: m };
    spec.validate()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    loss_value(model, batch, &spec, Some(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{exact_hessian, fd, value_and_gradient};
    use crate::models::Activation;
    use crate::numkit::norm;

    fn rows(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn ce_zero_at_perfect_fit() {
        let probs = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let targets = probs.clone();
        // The clamp leaves -ln(1 - 1e-12) ~ 1e-12 behind.
        assert!(cross_entropy(&probs, &targets).unwrap() <= 1e-11);
    }

    #[test]
    fn ce_hand_value() {
        let probs = rows(&[&[0.5, 0.5]]);
        let targets = rows(&[&[1.0, 0.0]]);
        let ce = cross_entropy(&probs, &targets).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_equals_ce() {
        let probs = rows(&[&[0.3, 0.2, 0.5], &[0.6, 0.1, 0.3]]);
        let targets = rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        let ce = cross_entropy(&probs, &targets).unwrap();
        let fl = focal_loss(&probs, &targets, 0.0).unwrap();
        assert!((ce - fl).abs() <= 1e-12);
    }

    #[test]
    fn focal_hand_value() {
        // One-hot, p_true = 0.9, gamma = 2 -> 0.01 * (-ln 0.9).
        let probs = rows(&[&[0.9, 0.1]]);
        let targets = rows(&[&[1.0, 0.0]]);
        let fl = focal_loss(&probs, &targets, 2.0).unwrap();
        let expected = 0.01 * -(0.9_f64.ln());
        assert!((fl - expected).abs() < 1e-15, "{fl} vs {expected}");
        assert!((fl - 1.05361e-3).abs() < 1e-8);
    }

    #[test]
    fn focal_vanishes_at_confident_correct() {
        let probs = rows(&[&[1.0, 0.0]]);
        let targets = rows(&[&[1.0, 0.0]]);
        for gamma in [0.5, 1.0, 2.0, 5.0] {
            assert!(focal_loss(&probs, &targets, gamma).unwrap() <= 1e-11);
        }
    }

    #[test]
    fn focal_monotone_in_gamma() {
        let mut rng = RngStream::new(17);
        for _ in 0..50 {
            let a = rng.range(0.05, 0.9);
            let b = rng.range(0.01, 1.0 - a - 0.01);
            let probs = rows(&[&[a, b, 1.0 - a - b]]);
            let targets = rows(&[&[1.0, 0.0, 0.0]]);
            let gammas = [0.0, 0.5, 1.0, 2.0, 3.0, 5.0];
            let vals: Vec<f64> = gammas
                .iter()
                .map(|&g| focal_loss(&probs, &targets, g).unwrap())
                .collect();
            for w in vals.windows(2) {
                assert!(w[1] <= w[0] + 1e-15, "{vals:?}");
            }
        }
    }

    #[test]
    fn entropy_examples() {
        let uniform = rows(&[&[0.25, 0.25, 0.25, 0.25]]);
        assert!((conditional_entropy(&uniform).unwrap() - 4.0_f64.ln()).abs() < 1e-10);
        let onehot = rows(&[&[1.0, 0.0, 0.0, 0.0]]);
        assert!(conditional_entropy(&onehot).unwrap() < 1e-10);
        let skew = rows(&[&[0.25, 0.75]]);
        let expected = -(0.25_f64 * 0.25_f64.ln() + 0.75 * 0.75_f64.ln());
        assert!((conditional_entropy(&skew).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.562335).abs() < 1e-6);
    }

    #[test]
    fn lower_bound_gap_zero_at_gamma_zero() {
        let probs = rows(&[&[0.3, 0.7], &[0.8, 0.2]]);
        let targets = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let gap = focal_lower_bound_gap(&probs, &targets, 0.0).unwrap();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn lower_bound_gap_nonnegative_for_gamma_ge_one() {
        // Brute force over random stochastic rows.
        let mut rng = RngStream::new(23);
        for _ in 0..2000 {
            let c = 2 + rng.index(3);
            let mut raw: Vec<f64> = (0..c).map(|_| rng.range(0.01, 1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|x| *x /= s);
            let label = rng.index(c);
            let probs = Matrix::from_rows(&[raw]).unwrap();
            let targets = one_hot(&[label], c).unwrap();
            for gamma in [1.0, 2.0, 5.0] {
                let gap = focal_lower_bound_gap(&probs, &targets, gamma).unwrap();
                assert!(gap >= -1e-10, "gamma {gamma}: gap {gap}");
            }
        }
    }

    #[test]
    fn pointwise_gradient_limit_table() {
        // gamma = 0.5: limit 0.5.
        let g = focal_pointwise_gradient(1.0 - 1e-8, 0.5).unwrap();
        assert!((g - 0.5).abs() < 1e-4, "{g}");
        // gamma > 0.5: limit 0.
        let g = focal_pointwise_gradient(1.0 - 1e-6, 2.0).unwrap();
        assert!(g.abs() <= 1e-10, "{g}");
        // gamma = 0: limit 0.
        let g = focal_pointwise_gradient(1.0 - 1e-10, 0.0).unwrap();
        assert!(g.abs() < 1e-9, "{g}");
        // 0 < gamma < 0.5: diverges upward.
        let a = focal_pointwise_gradient(1.0 - 1e-6, 0.25).unwrap();
        let b = focal_pointwise_gradient(1.0 - 1e-8, 0.25).unwrap();
        assert!(b > a && a > 10.0, "{a} then {b}");
    }

    #[test]
    fn pointwise_gradient_rejects_bad_p() {
        assert!(focal_pointwise_gradient(0.0, 1.0).is_err());
        assert!(focal_pointwise_gradient(1.0, 1.0).is_err());
    }

    #[test]
    fn plain_derivative_differs_from_printed_form() {
        // At gamma = 0 the ordinary derivative tends to -1, not 0.
        let d = focal_pointwise_gradient_plain(1.0 - 1e-9, 0.0).unwrap();
        assert!((d + 1.0).abs() < 1e-6);
        // And it matches a central difference of -(1-p)^g ln p.
        let (p, g) = (0.7, 2.0);
        let f = |x: f64| -(1.0 - x).powf(g) * x.ln();
        let h = 1e-6;
        let fdiff = (f(p + h) - f(p - h)) / (2.0 * h);
        let d = focal_pointwise_gradient_plain(p, g).unwrap();
        assert!((d - fdiff).abs() < 1e-7);
    }

    #[test]
    fn curvature_scale_values() {
        assert_eq!(focal_curvature_scale(0.3, 0.0), 1.0);
        assert!((focal_curvature_scale(0.9, 2.0) - 0.01).abs() < 1e-15);
        // Strictly decreasing in gamma for p0 inside (0,1).
        let mut last = f64::INFINITY;
        for gamma in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let s = focal_curvature_scale(0.4, gamma);
            assert!(s < last);
            last = s;
        }
    }

    fn tiny_setup(seed: u64) -> (MlpModel, LabeledBatch) {
        let mut rng = RngStream::new(seed);
        let model = MlpModel::with_random_init(&[2, 4, 3], Activation::Tanh, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| vec![rng.range(-1.5, 1.5), rng.range(-1.5, 1.5)])
            .collect();
        let labels: Vec<usize> = (0..6).map(|_| rng.index(3)).collect();
        let batch = LabeledBatch::new(Matrix::from_rows(&rows).unwrap(), labels, 3).unwrap();
        (model, batch)
    }

    #[test]
    fn tape_loss_matches_probs_path() {
        let (model, batch) = tiny_setup(31);
        let probs = model.forward_probs(batch.inputs()).unwrap();
        let targets = batch.targets().unwrap();
        for spec in [LossSpec::CrossEntropy, LossSpec::Focal { gamma: 2.0 }] {
            let tape_val = loss_value(&model, &batch, &spec, None).unwrap();
            let direct = match &spec {
                LossSpec::CrossEntropy => cross_entropy(&probs, &targets).unwrap(),
                LossSpec::Focal { gamma } => focal_loss(&probs, &targets, *gamma).unwrap(),
                _ => unreachable!(),
            };
            assert!((tape_val - direct).abs() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (model, batch) = tiny_setup(37);
        for spec in [
            LossSpec::CrossEntropy,
            LossSpec::Focal { gamma: 0.5 },
            LossSpec::Focal { gamma: 2.0 },
        ] {
            let build = |t: &mut Tape, ids: &[NodeId]| {
                loss_node(&model, t, ids, &batch, &spec, &[]).unwrap()
            };
            let (_, grad) = value_and_gradient(build, model.params()).unwrap();
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.set_params(p).unwrap();
                loss_value(&m, &batch, &spec, None).unwrap()
            };
            let gfd = fd::gradient(&f, model.params());
            let diff = norm(&grad.iter().zip(&gfd).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(diff <= 1e-6 * (1.0 + norm(&gfd)), "{spec:?}: {diff}");
        }
    }

    #[test]
    fn trace_penalty_exact_on_diagonal_quadratic() {
        // On f = 1/2 theta^T diag(1,2,3) theta every Rademacher probe
        // gives v^T H v = 6 exactly, so the penalty is tau * 6.
        let mut tape = Tape::new();
        let theta: Vec<NodeId> = [0.3, -0.2, 0.9].iter().map(|&v| tape.input(v)).collect();
        let diag = [1.0, 2.0, 3.0];
        let mut terms = Vec::new();
        for (i, &d) in diag.iter().enumerate() {
            let sq = tape.mul(theta[i], theta[i]);
            terms.push(tape.mul_const(sq, 0.5 * d));
        }
        let out = tape.sum(&terms);
        let mut rng = RngStream::new(5);
        let probes: Vec<Vec<f64>> = (0..7).map(|_| rng.rademacher(3).unwrap()).collect();
        let qf = hessian_quadratic_form_nodes(&mut tape, out, &theta, &probes);
        for q in qf {
            assert_eq!(tape.value(q), 6.0);
        }
    }

    #[test]
    fn trace_reg_tau_zero_is_ce() {
        let (model, batch) = tiny_setup(41);
        let mut rng = RngStream::new(1);
        let reg = trace_regularized_loss(&model, &batch, 0.0, 3, &mut rng).unwrap();
        let ce = loss_value(&model, &batch, &LossSpec::CrossEntropy, None).unwrap();
        assert_eq!(reg, ce);
    }

    #[test]
    fn trace_reg_linear_in_tau_for_fixed_probes() {
        let (model, batch) = tiny_setup(43);
        let probes = {
            let mut rng = RngStream::new(2);
            vec![rng.rademacher(model.param_count()).unwrap()]
        };
        let eval = |tau: f64| {
            let mut tape = Tape::new();
            let theta: Vec<NodeId> = model.params().iter().map(|&v| tape.input(v)).collect();
            let spec = LossSpec::TraceReg { tau, probes: 1 };
            let out = loss_node(&model, &mut tape, &theta, &batch, &spec, &probes).unwrap();
            tape.value(out)
        };
        let ce = loss_value(&model, &batch, &LossSpec::CrossEntropy, None).unwrap();
        let one = eval(1e-2) - ce;
        let two = eval(2e-2) - ce;
        assert!((two - 2.0 * one).abs() < 1e-12 * (1.0 + one.abs().max(two.abs())));
    }

    #[test]
    fn trace_reg_penalty_is_hutchinson_of_ce_hessian() {
        let (model, batch) = tiny_setup(47);
        let ce_builder = |t: &mut Tape, ids: &[NodeId]| {
            loss_node(&model, t, ids, &batch, &LossSpec::CrossEntropy, &[]).unwrap()
        };
        let h = exact_hessian(ce_builder, model.params()).unwrap();
        let mut rng = RngStream::new(3);
        let probe = rng.rademacher(model.param_count()).unwrap();
        let expected: f64 = {
            let hv = h.matvec(&probe).unwrap();
            probe.iter().zip(&hv).map(|(a, b)| a * b).sum()
        };
        let tau = 0.5;
        let mut tape = Tape::new();
        let theta: Vec<NodeId> = model.params().iter().map(|&v| tape.input(v)).collect();
        let spec = LossSpec::TraceReg { tau, probes: 1 };
        let out = loss_node(
            &model,
            &mut tape,
            &theta,
            &batch,
            &spec,
            std::slice::from_ref(&probe),
        )
        .unwrap();
        let ce = loss_value(&model, &batch, &LossSpec::CrossEntropy, None).unwrap();
        let penalty = tape.value(out) - ce;
        assert!(
            (penalty - tau * expected).abs() <= 1e-9 * (1.0 + expected.abs()),
            "{penalty} vs {}",
            tau * expected
        );
    }

    #[test]
    fn trace_reg_gradient_matches_fd_with_frozen_probes() {
        let (model, batch) = tiny_setup(53);
        let probes = {
            let mut rng = RngStream::new(4);
            vec![rng.rademacher(model.param_count()).unwrap()]
        };
        let spec = LossSpec::TraceReg { tau: 1e-2, probes: 1 };
        let build = |t: &mut Tape, ids: &[NodeId]| {
            loss_node(&model, t, ids, &batch, &spec, &probes).unwrap()
        };
        let (_, grad) = value_and_gradient(build, model.params()).unwrap();
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = p.iter().map(|&v| tape.input(v)).collect();
            let out = loss_node(&model, &mut tape, &ids, &batch, &spec, &probes).unwrap();
            tape.value(out)
        };
        let gfd = fd::gradient(&f, model.params());
        let diff = norm(&grad.iter().zip(&gfd).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(diff <= 1e-4 * (1.0 + norm(&gfd)), "diff {diff}");
    }
}
