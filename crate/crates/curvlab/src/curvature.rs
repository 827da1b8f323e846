//! Contractions of the parameter-space Hessian: stochastic trace,
//! dominant eigenvalue, spectral radius, operator norms, Laplacian,
//! and Gaussian curvature.
//!
//! Estimators consume any [`HvpMap`], so the same code runs against the
//! reverse-mode oracle or a dense matrix. Probes may be evaluated in
//! parallel; results are reduced in probe-index order, so output does
//! not depend on scheduling.

use crate::autodiff::HvpMap;
use crate::error::{Error, Result};
use crate::numkit::{self, dot, norm, Matrix, RngStream, SYM_EIGEN_CAP};
use serde::{Deserialize, Serialize};

/// Hutchinson trace estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEstimate {
    pub estimate: f64,
    /// Sample standard deviation of `v^T H v` divided by `sqrt(M)`;
    /// zero when `M == 1`.
    pub stderr: f64,
    pub probes: usize,
}

/// `(1/M) sum_i v_i^T H v_i` with Rademacher probes; unbiased for `tr H`.
pub fn hutchinson_trace<O: HvpMap>(
    oracle: &mut O,
    probes: usize,
    rng: &mut RngStream,
) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    let d = oracle.dim();
    let mut quads = Vec::with_capacity(probes);
    for i in 0..probes {
        let v = rng.rademacher(d)?;
        let hv = oracle.apply(&v).map_err(|e| {
            Error::NonFinite(format!("Hessian-vector product failed at probe {i}: {e}"))
        })?;
        quads.push(dot(&v, &hv));
    }
    let mean = quads.iter().sum::<f64>() / probes as f64;
    let stderr = if probes > 1 {
        let var = quads.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>()
            / (probes as f64 - 1.0);
        (var / probes as f64).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        estimate: mean,
        stderr,
        probes,
    })
}

/// Power-iteration result. `lambda` keeps its sign; the spectral radius
/// is `lambda.abs()`. `tie_suspected` flags Rayleigh quotients that
/// oscillate between equal magnitudes of opposite sign, which happens
/// when the largest and the most negative eigenvalue tie.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerIterResult {
    pub lambda: f64,
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
    pub tie_suspected: bool,
}

/// Dominant eigenvalue by magnitude via power iteration from a random
/// unit start. Stops when successive Rayleigh quotients differ by at
/// most `tol`; otherwise returns the best estimate flagged unconverged.
pub fn power_iteration_lambda_max<O: HvpMap>(
    oracle: &mut O,
    iters: usize,
    tol: f64,
    rng: &mut RngStream,
) -> Result<PowerIterResult> {
    if iters == 0 {
        return Err(Error::InvalidArgument("need at least one iteration".into()));
    }
    let d = oracle.dim();
    let mut u = rng.unit_vector(d)?;
    let mut rayleigh = f64::NAN;
    let mut used = 0;
    let mut converged = false;
    let mut tie = false;
    for k in 0..iters {
        used = k + 1;
        let hu = oracle.apply(&u)?;
        let rq = dot(&u, &hu);
        let n = norm(&hu);
        if n <= 1e-300 {
            // The operator annihilates the current vector; zero map.
            return Ok(PowerIterResult {
                lambda: 0.0,
                residual: 0.0,
                iters: used,
                converged: true,
                tie_suspected: false,
            });
        }
        if k > 0 {
            let scale = 1.0_f64.max(rq.abs());
            if (rq - rayleigh).abs() <= tol * scale {
                u = hu.iter().map(|x| x / n).collect();
                converged = true;
                break;
            }
            if (rq + rayleigh).abs() <= tol * scale && rq.abs() > tol {
                // Sign flips with matching magnitude: +/- lambda tie.
                tie = true;
            }
        }
        rayleigh = rq;
        u = hu.iter().map(|x| x / n).collect();
    }
    let hu = oracle.apply(&u)?;
    let lambda = dot(&u, &hu);
    let resid_vec: Vec<f64> = hu.iter().zip(&u).map(|(h, ui)| h - lambda * ui).collect();
    let residual = norm(&resid_vec);
    Ok(PowerIterResult {
        lambda,
        residual,
        iters: used,
        converged,
        tie_suspected: tie && !converged,
    })
}

/// Maximum absolute eigenvalue.
pub fn spectral_radius(eigenvalues: &[f64]) -> Result<f64> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidArgument("empty eigenvalue list".into()));
    }
    Ok(eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs())))
}

/// Gelfand sequence `||H^k||_1^{1/k}` for `k = 1..=k_max`.
///
/// Powers are renormalized each step and tracked in log space, so the
/// sequence never overflows; any non-finite input still truncates the
/// sequence and sets `truncated`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerLimitSequence {
    pub values: Vec<f64>,
    pub truncated: bool,
}

pub fn spectral_radius_power_limit(h: &Matrix, k_max: usize) -> Result<PowerLimitSequence> {
    if !h.is_square() {
        return Err(Error::Shape("power limit needs a square matrix".into()));
    }
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be >= 1".into()));
    }
    let mut values = Vec::with_capacity(k_max);
    let mut truncated = false;
    // m holds H^k / exp(log_scale).
    let mut m = h.clone();
    let mut log_scale = 0.0_f64;
    for k in 1..=k_max {
        let n1 = operator_norm(&m, OpNormKind::One)?;
        if !n1.is_finite() {
            truncated = true;
            break;
        }
        if n1 == 0.0 {
            values.push(0.0);
            break;
        }
        values.push(((n1.ln() + log_scale) / k as f64).exp());
        if k == k_max {
            break;
        }
        let scaled = m.scale(1.0 / n1);
        log_scale += n1.ln();
        m = scaled.matmul(h)?;
    }
    Ok(PowerLimitSequence { values, truncated })
}

/// Trace of a dense Hessian (the Laplacian in Euclidean coordinates).
pub fn laplacian_exact(h: &Matrix) -> Result<f64> {
    if !h.is_square() {
        return Err(Error::Shape("laplacian needs a square matrix".into()));
    }
    Ok((0..h.rows()).map(|i| h.get(i, i)).sum())
}

/// Laplacian estimate through the Hutchinson trace of an operator.
pub fn laplacian_estimate<O: HvpMap>(
    oracle: &mut O,
    probes: usize,
    rng: &mut RngStream,
) -> Result<TraceEstimate> {
    hutchinson_trace(oracle, probes, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpNormKind {
    /// Max absolute column sum.
    One,
    /// Max absolute row sum.
    Inf,
}

/// Induced matrix norm; satisfies `||H||_p >= A(H)`.
pub fn operator_norm(h: &Matrix, kind: OpNormKind) -> Result<f64> {
    if !h.is_square() {
        return Err(Error::Shape("operator norm needs a square matrix".into()));
    }
    let n = h.rows();
    let mut best = 0.0_f64;
    for outer in 0..n {
        let mut sum = 0.0;
        for inner in 0..n {
            sum += match kind {
                OpNormKind::One => h.get(inner, outer).abs(),
                OpNormKind::Inf => h.get(outer, inner).abs(),
            };
        }
        best = best.max(sum);
    }
    Ok(best)
}

/// Gaussian curvature `det H`, the product of principal curvatures.
/// Requires a symmetric matrix.
pub fn gaussian_curvature(h: &Matrix) -> Result<f64> {
    if !h.is_square() {
        return Err(Error::Shape("gaussian curvature needs a square matrix".into()));
    }
    let allowed = 1e-8 * (1.0 + h.max_abs());
    let asymmetry = h.max_asymmetry();
    if asymmetry > allowed {
        return Err(Error::NotSymmetric { asymmetry, allowed });
    }
    numkit::det(h)
}

/// Largest dimension for which reports include determinant and exact
/// eigenvalues (the eigensolver additionally caps at [`SYM_EIGEN_CAP`]).
pub const DENSE_REPORT_CAP: usize = 2000;

/// All curvature contractions of one Hessian, with estimator metadata.
/// Serializes to a flat JSON object with fixed key names.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub dim: usize,
    pub trace: f64,
    pub trace_stderr: f64,
    pub probes: usize,
    pub lambda_max: f64,
    pub residual: f64,
    pub iters: usize,
    pub opnorm_1: f64,
    pub opnorm_inf: f64,
    pub det: Option<f64>,
    #[serde(skip)]
    pub eigenvalues: Option<Vec<f64>>,
}

impl CurvatureReport {
    /// Spectral radius `A(H) = |lambda_max|`.
    pub fn spectral_radius(&self) -> f64 {
        self.lambda_max.abs()
    }
}

/// Runs the full estimator battery against a dense symmetric Hessian.
/// `seed` fixes the probe stream and the power-iteration start.
pub fn curvature_report(
    h: &Matrix,
    probes: usize,
    power_iters: usize,
    seed: u64,
) -> Result<CurvatureReport> {
    let mut oracle = crate::autodiff::DenseHvp::new(h.clone())?;
    let root = RngStream::new(seed);
    let trace = hutchinson_trace(&mut oracle, probes, &mut root.substream(1))?;
    let power = power_iteration_lambda_max(&mut oracle, power_iters, 1e-10, &mut root.substream(2))?;
    let d = h.rows();
    let (det, eigenvalues) = if d <= DENSE_REPORT_CAP {
        let det = numkit::det(h)?;
        let eig = if d <= SYM_EIGEN_CAP {
            Some(numkit::sym_eigen(h, 1e-8)?.0)
        } else {
            None
        };
        (Some(det), eig)
    } else {
        (None, None)
    };
    Ok(CurvatureReport {
        dim: d,
        trace: trace.estimate,
        trace_stderr: trace.stderr,
        probes: trace.probes,
        lambda_max: power.lambda,
        residual: power.residual,
        iters: power.iters,
        opnorm_1: operator_norm(h, OpNormKind::One)?,
        opnorm_inf: operator_norm(h, OpNormKind::Inf)?,
        det,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::DenseHvp;

    fn dense(entries: &[&[f64]]) -> DenseHvp {
        let m =
            Matrix::from_rows(&entries.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        DenseHvp::new(m).unwrap()
    }

    #[test]
    fn hutchinson_exact_on_diagonal() {
        let mut oracle = dense(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 3.0]]);
        for m in [1usize, 2, 10, 100] {
            let mut rng = RngStream::new(m as u64);
            let est = hutchinson_trace(&mut oracle, m, &mut rng).unwrap();
            assert_eq!(est.estimate, 6.0, "M = {m}");
        }
    }

    #[test]
    fn hutchinson_exact_on_identity() {
        let mut oracle = DenseHvp::new(Matrix::identity(10)).unwrap();
        let mut rng = RngStream::new(0);
        let est = hutchinson_trace(&mut oracle, 3, &mut rng).unwrap();
        assert_eq!(est.estimate, 10.0);
        assert_eq!(est.stderr, 0.0);
    }

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.range(-1.0, 1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    #[test]
    fn hutchinson_close_to_exact_trace_on_random_matrix() {
        // Diagonal shift keeps the exact trace well above the probe
        // noise floor, so a 3% relative check is meaningful.
        let mut h = random_symmetric(50, 77);
        for i in 0..50 {
            h.set(i, i, h.get(i, i) + 5.0);
        }
        let exact = laplacian_exact(&h).unwrap();
        let mut oracle = DenseHvp::new(h).unwrap();
        let mut rng = RngStream::new(5);
        let est = hutchinson_trace(&mut oracle, 2000, &mut rng).unwrap();
        assert!(
            (est.estimate - exact).abs() <= 0.03 * exact.abs(),
            "estimate {} vs exact {exact}",
            est.estimate
        );
    }

    #[test]
    fn hutchinson_unbiased_over_repeats() {
        let h = random_symmetric(30, 99);
        let exact = laplacian_exact(&h).unwrap();
        let mut oracle = DenseHvp::new(h).unwrap();
        let runs = 200;
        let mut estimates = Vec::with_capacity(runs);
        for r in 0..runs {
            let mut rng = RngStream::new(1000 + r as u64);
            estimates.push(hutchinson_trace(&mut oracle, 50, &mut rng).unwrap().estimate);
        }
        let mean = estimates.iter().sum::<f64>() / runs as f64;
        let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
            / (runs as f64 - 1.0);
        let pooled_stderr = (var / runs as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 4.0 * pooled_stderr,
            "mean {mean}, exact {exact}, pooled stderr {pooled_stderr}"
        );
    }

    #[test]
    fn power_iteration_diagonal() {
        let mut oracle = dense(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 3.0]]);
        let mut rng = RngStream::new(1);
        let r = power_iteration_lambda_max(&mut oracle, 500, 1e-12, &mut rng).unwrap();
        assert!((r.lambda - 3.0).abs() < 1e-8, "{r:?}");
        assert!(r.converged);
    }

    #[test]
    fn power_iteration_hand_2x2() {
        let mut oracle = dense(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let mut rng = RngStream::new(2);
        let r = power_iteration_lambda_max(&mut oracle, 500, 1e-13, &mut rng).unwrap();
        assert!((r.lambda - 3.0).abs() < 1e-10);
        assert!(r.residual < 1e-6);
    }

    #[test]
    fn power_iteration_keeps_sign() {
        let mut oracle = dense(&[&[-5.0, 0.0], &[0.0, 2.0]]);
        let mut rng = RngStream::new(3);
        let r = power_iteration_lambda_max(&mut oracle, 500, 1e-12, &mut rng).unwrap();
        assert!((r.lambda + 5.0).abs() < 1e-8);
        assert!((r.lambda.abs() - 5.0).abs() < 1e-8);
    }

    #[test]
    fn spectral_radius_examples() {
        assert_eq!(spectral_radius(&[1.0, 2.0, 3.0]).unwrap(), 3.0);
        assert_eq!(spectral_radius(&[-5.0, 2.0]).unwrap(), 5.0);
        assert_eq!(spectral_radius(&[0.0]).unwrap(), 0.0);
        assert!(spectral_radius(&[]).is_err());
    }

    #[test]
    fn power_limit_identity_constant_one() {
        let seq = spectral_radius_power_limit(&Matrix::identity(4), 16).unwrap();
        assert!(!seq.truncated);
        for v in seq.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_limit_diagonal_constant_two() {
        let seq = spectral_radius_power_limit(&Matrix::diag(&[2.0, 1.0]), 16).unwrap();
        for v in seq.values {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_limit_converges_to_spectral_radius() {
        let h = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let seq = spectral_radius_power_limit(&h, 64).unwrap();
        let last = *seq.values.last().unwrap();
        assert!((last - 3.0).abs() <= 0.05 * 3.0, "last {last}");
        // No overflow even though 3^64 would overflow naive powers of
        // larger matrices; try one that would overflow un-normalized.
        let big = Matrix::diag(&[1e5, 1.0]);
        let seq = spectral_radius_power_limit(&big, 128).unwrap();
        assert!(!seq.truncated);
        assert!((seq.values.last().unwrap() - 1e5).abs() < 1.0);
    }

    #[test]
    fn laplacian_matches_eigenvalue_sum() {
        let h = random_symmetric(12, 13);
        let tr = laplacian_exact(&h).unwrap();
        let (evals, _) = numkit::sym_eigen(&h, 1e-9).unwrap();
        let sum: f64 = evals.iter().sum();
        assert!((tr - sum).abs() < 1e-9 * (1.0 + sum.abs()));
    }

    #[test]
    fn operator_norm_examples() {
        let d = Matrix::diag(&[1.0, 2.0, 3.0]);
        assert_eq!(operator_norm(&d, OpNormKind::One).unwrap(), 3.0);
        let h = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, -2.0]]).unwrap();
        let n1 = operator_norm(&h, OpNormKind::One).unwrap();
        assert_eq!(n1, 3.0);
        // Eigenvalues are +/- sqrt(5), so the norm strictly dominates.
        assert!(n1 > 5.0_f64.sqrt());
        // Symmetric matrices have equal 1- and inf-norms.
        assert_eq!(n1, operator_norm(&h, OpNormKind::Inf).unwrap());
    }

    #[test]
    fn norm_dominates_spectral_radius_on_random_symmetric() {
        for seed in 0..500 {
            let h = random_symmetric(6, 40_000 + seed);
            let (evals, _) = numkit::sym_eigen(&h, 1e-9).unwrap();
            let a = spectral_radius(&evals).unwrap();
            let n1 = operator_norm(&h, OpNormKind::One).unwrap();
            assert!(n1 >= a - 1e-12, "seed {seed}: {n1} < {a}");
        }
    }

    #[test]
    fn psd_spectral_radius_bounded_by_trace() {
        for seed in 0..500 {
            // Gram matrix B^T B is PSD.
            let b = random_symmetric(5, 90_000 + seed);
            let h = b.transpose().matmul(&b).unwrap();
            let (evals, _) = numkit::sym_eigen(&h, 1e-8).unwrap();
            let a = spectral_radius(&evals).unwrap();
            let tr = laplacian_exact(&h).unwrap();
            assert!(a <= tr + 1e-12, "seed {seed}: A {a} > tr {tr}");
        }
    }

    #[test]
    fn gaussian_curvature_examples() {
        assert_eq!(gaussian_curvature(&Matrix::identity(3)).unwrap(), 1.0);
        assert_eq!(gaussian_curvature(&Matrix::diag(&[2.0, -3.0])).unwrap(), -6.0);
        let h = random_symmetric(7, 55);
        let k = gaussian_curvature(&h).unwrap();
        let (evals, _) = numkit::sym_eigen(&h, 1e-9).unwrap();
        let prod: f64 = evals.iter().product();
        assert!((k - prod).abs() <= 1e-9 * prod.abs().max(1e-6));
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        let h = Matrix::diag(&[1.0, 2.0, 3.0]);
        let report = curvature_report(&h, 10, 100, 7).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        for key in [
            "trace",
            "trace_stderr",
            "probes",
            "lambda_max",
            "residual",
            "iters",
            "opnorm_1",
            "opnorm_inf",
            "det",
            "dim",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["trace"], 6.0);
        assert_eq!(json["dim"], 3);
        assert!(report.eigenvalues.is_some());
        assert!((report.spectral_radius() - 3.0).abs() < 1e-8);
    }
}
