//! KL divergences, the Fisher quadratic approximation, maximum-entropy
//! Gibbs densities on explicit parameter grids, and the tunable-rate
//! PAC-Bayes bound with its closed-form minimizers.
//!
//! Everything runs on explicit 1-D or 2-D lattices with trapezoid
//! weights; normalizers go through log-sum-exp because `beta * L` can
//! span hundreds of nats.

use crate::error::{Error, Result};
use crate::geometry::ParametricFamily;
use crate::numkit::Matrix;
use std::io::Write;

/// Lattice over the parameter space with quadrature weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaGrid {
    pub dim: usize,
    /// One coordinate tuple per cell.
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl ThetaGrid {
    /// Uniform 1-D lattice with trapezoid weights.
    pub fn uniform_1d(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || hi <= lo {
            return Err(Error::InvalidArgument("need n >= 2 and hi > lo".into()));
        }
        let dx = (hi - lo) / (n - 1) as f64;
        let points: Vec<Vec<f64>> = (0..n).map(|i| vec![lo + i as f64 * dx]).collect();
        let weights = (0..n)
            .map(|i| if i == 0 || i == n - 1 { 0.5 * dx } else { dx })
            .collect();
        Ok(Self {
            dim: 1,
            points,
            weights,
        })
    }

    /// Uniform 2-D lattice (product of two trapezoid rules).
    pub fn uniform_2d(lo: [f64; 2], hi: [f64; 2], n: [usize; 2]) -> Result<Self> {
        let a = Self::uniform_1d(lo[0], hi[0], n[0])?;
        let b = Self::uniform_1d(lo[1], hi[1], n[1])?;
        let mut points = Vec::with_capacity(a.len() * b.len());
        let mut weights = Vec::with_capacity(a.len() * b.len());
        for (pa, wa) in a.points.iter().zip(&a.weights) {
            for (pb, wb) in b.points.iter().zip(&b.weights) {
                points.push(vec![pa[0], pb[0]]);
                weights.push(wa * wb);
            }
        }
        Ok(Self {
            dim: 2,
            points,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Nonnegative density values on a grid, integrating to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub grid: ThetaGrid,
    pub density: Vec<f64>,
}

impl GridDensity {
    pub fn new(grid: ThetaGrid, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.len() {
            return Err(Error::Shape("density length != grid length".into()));
        }
        if density.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidArgument("density must be finite and >= 0".into()));
        }
        let out = Self { grid, density };
        let mass = out.total_mass();
        if (mass - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "density integrates to {mass}, not 1"
            )));
        }
        Ok(out)
    }

    pub fn total_mass(&self) -> f64 {
        self.density
            .iter()
            .zip(&self.grid.weights)
            .map(|(p, w)| p * w)
            .sum()
    }

    /// Expectation of cell values under the density.
    pub fn expectation(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.grid.len() {
            return Err(Error::Shape("values length != grid length".into()));
        }
        Ok(values
            .iter()
            .zip(&self.density)
            .zip(&self.grid.weights)
            .map(|((v, p), w)| v * p * w)
            .sum())
    }

    /// CSV rows `theta..., weight, density` with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header: Vec<String> = (0..self.grid.dim).map(|i| format!("theta{i}")).collect();
        header.push("weight".into());
        header.push("density".into());
        writeln!(w, "{}", header.join(","))?;
        for ((p, wt), d) in self
            .grid
            .points
            .iter()
            .zip(&self.grid.weights)
            .zip(&self.density)
        {
            let coords: Vec<String> = p.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{},{wt},{d}", coords.join(","))?;
        }
        Ok(())
    }
}

fn check_losses(loss: &[f64], grid: &ThetaGrid) -> Result<()> {
    if loss.len() != grid.len() {
        return Err(Error::Shape("loss values length != grid length".into()));
    }
    if loss.iter().all(|l| !l.is_finite()) {
        return Err(Error::InvalidArgument("all loss values non-finite".into()));
    }
    if loss.iter().any(|l| l.is_nan()) {
        return Err(Error::NonFinite("NaN loss value".into()));
    }
    Ok(())
}

/// `ln sum_i w_i exp(a_i)` with max-shift stabilization.
fn log_sum_exp_weighted(a: impl Iterator<Item = f64> + Clone, w: &[f64]) -> f64 {
    let m = a.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = a.zip(w).map(|(ai, wi)| wi * (ai - m).exp()).sum();
    m + s.ln()
}

/// Maximum-entropy density under an expected-loss constraint:
/// `p(theta) = alpha exp(-beta L(theta))` normalized on the grid.
/// `beta = 0` yields the uniform density.
pub fn maxwell_boltzmann_density(
    loss: &[f64],
    grid: &ThetaGrid,
    beta: f64,
) -> Result<GridDensity> {
    check_losses(loss, grid)?;
    let ln_z = log_sum_exp_weighted(loss.iter().map(|l| -beta * l), &grid.weights);
    if !ln_z.is_finite() {
        return Err(Error::Numerical(format!(
            "Gibbs normalizer degenerate at beta = {beta}"
        )));
    }
    let density: Vec<f64> = loss.iter().map(|l| (-beta * l - ln_z).exp()).collect();
    GridDensity::new(grid.clone(), density)
}

/// Expected loss under the Gibbs density at inverse temperature `beta`;
/// strictly decreasing in `beta` whenever the loss is not constant.
pub fn phi_beta(loss: &[f64], grid: &ThetaGrid, beta: f64) -> Result<f64> {
    let gibbs = maxwell_boltzmann_density(loss, grid, beta)?;
    gibbs.expectation(loss)
}

/// The unnormalized product form
/// `(int e^{-beta L}) (int L e^{-beta L})`, kept computable for
/// comparison; monotonicity assertions attach to [`phi_beta`] only.
pub fn phi_beta_product(loss: &[f64], grid: &ThetaGrid, beta: f64) -> Result<f64> {
    check_losses(loss, grid)?;
    let z: f64 = loss
        .iter()
        .zip(&grid.weights)
        .map(|(l, w)| w * (-beta * l).exp())
        .sum();
    let lz: f64 = loss
        .iter()
        .zip(&grid.weights)
        .map(|(l, w)| w * l * (-beta * l).exp())
        .sum();
    Ok(z * lz)
}

/// Solves `phi_beta(beta) = delta_gamma` by bisection on the monotone
/// normalized expectation. The target must be attainable:
/// strictly between the minimum and maximum loss on the grid.
pub fn solve_beta(loss: &[f64], grid: &ThetaGrid, delta_gamma: f64, tol: f64) -> Result<f64> {
    check_losses(loss, grid)?;
    if tol <= 0.0 {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let lo_loss = loss.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_loss = loss.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(delta_gamma > lo_loss && delta_gamma < hi_loss) {
        return Err(Error::InvalidArgument(format!(
            "target {delta_gamma} outside the attainable open interval ({lo_loss}, {hi_loss})"
        )));
    }

    // Expand a bracket: phi decreases, so phi(lo) >= target >= phi(hi).
    let mut lo = -1.0;
    let mut hi = 1.0;
    for _ in 0..200 {
        if phi_beta(loss, grid, lo)? >= delta_gamma {
            break;
        }
        lo *= 2.0;
    }
    for _ in 0..200 {
        if phi_beta(loss, grid, hi)? <= delta_gamma {
            break;
        }
        hi *= 2.0;
    }
    if phi_beta(loss, grid, lo)? < delta_gamma || phi_beta(loss, grid, hi)? > delta_gamma {
        return Err(Error::Numerical(
            "could not bracket the Gibbs temperature".into(),
        ));
    }

    let mut mid = 0.0;
    for _ in 0..500 {
        mid = 0.5 * (lo + hi);
        let phi = phi_beta(loss, grid, mid)?;
        if (phi - delta_gamma).abs() <= tol {
            return Ok(mid);
        }
        if phi > delta_gamma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical(format!(
        "bisection stalled at beta = {mid}"
    )))
}

/// Inputs of one PAC-Bayes bound evaluation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacBayesCase {
    /// Sample count.
    pub n: usize,
    /// Confidence parameter in (0, 1).
    pub epsilon: f64,
    /// Rate parameter in (0, 2).
    pub lambda: f64,
    /// KL divergence between posterior and prior, nonnegative.
    pub kl: f64,
    /// Posterior-expected empirical risk in [0, 1].
    pub emp_risk: f64,
}

impl PacBayesCase {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n", "sample count must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config("epsilon", "confidence must lie in (0, 1)"));
        }
        if !(self.lambda > 0.0 && self.lambda < 2.0) {
            return Err(Error::config("lambda", "lambda must lie in (0, 2)"));
        }
        if self.kl < 0.0 || !self.kl.is_finite() {
            return Err(Error::config("kl", "KL must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.emp_risk) {
            return Err(Error::config("emp_risk", "empirical risk must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Risk bound
/// `E[Rhat]/(1 - lambda/2) + (KL + ln(2 sqrt(n)/epsilon)) / (n lambda (1 - lambda/2))`.
///
/// Only `lambda` in (0, 2) and `n >= 1` are required here; `epsilon`
/// merely needs to be positive so identities like a vanishing log term
/// stay expressible. [`PacBayesCase::validate`] applies the stricter
/// field ranges used at the configuration boundary.
pub fn thiemann_bound(n: usize, epsilon: f64, lambda: f64, kl: f64, emp_risk: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 2.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in (0, 2), got {lambda}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if kl < 0.0 {
        return Err(Error::InvalidArgument("KL must be >= 0".into()));
    }
    let half = 1.0 - lambda / 2.0;
    let j = emp_risk / half;
    let log_term = (2.0 * (n as f64).sqrt() / epsilon).ln();
    Ok(j + (kl + log_term) / (n as f64 * lambda * half))
}

pub fn thiemann_bound_case(case: &PacBayesCase) -> Result<f64> {
    case.validate()?;
    thiemann_bound(case.n, case.epsilon, case.lambda, case.kl, case.emp_risk)
}

/// Closed-form minimizer of the bound over `lambda` for a fixed
/// posterior: `2 / (sqrt(2 n E[Rhat] / (KL + ln(2 sqrt(n)/delta)) + 1) + 1)`.
pub fn optimal_lambda(n: usize, kl: f64, emp_risk: f64, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let denom = kl + (2.0 * (n as f64).sqrt() / delta).ln();
    if denom <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "KL + ln(2 sqrt(n)/delta) must be positive, got {denom}"
        )));
    }
    Ok(2.0 / ((2.0 * n as f64 * emp_risk / denom + 1.0).sqrt() + 1.0))
}

/// Gibbs posterior `sigma(theta) ∝ prior(theta) e^{-lambda n Rhat(theta)}`;
/// at `lambda = 0` this is the prior itself.
pub fn gibbs_posterior(
    prior: &GridDensity,
    lambda: f64,
    n: usize,
    risk: &[f64],
) -> Result<GridDensity> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be >= 0".into()));
    }
    if risk.len() != prior.grid.len() {
        return Err(Error::Shape("risk values length != grid length".into()));
    }
    if lambda == 0.0 {
        return Ok(prior.clone());
    }
    let scale = lambda * n as f64;
    let log_terms = prior
        .density
        .iter()
        .zip(risk)
        .map(|(p, r)| if *p > 0.0 { p.ln() - scale * r } else { f64::NEG_INFINITY });
    let ln_z = log_sum_exp_weighted(log_terms.clone(), &prior.grid.weights);
    if !ln_z.is_finite() {
        return Err(Error::Numerical("posterior normalizer degenerate".into()));
    }
    let density: Vec<f64> = log_terms.map(|lt| (lt - ln_z).exp()).collect();
    GridDensity::new(prior.grid.clone(), density)
}

/// KL divergence between two densities on the same grid.
pub fn grid_kl(posterior: &GridDensity, prior: &GridDensity) -> Result<f64> {
    if posterior.grid != prior.grid {
        return Err(Error::Shape("grid mismatch in KL".into()));
    }
    let mut acc = 0.0;
    for ((p, q), w) in posterior
        .density
        .iter()
        .zip(&prior.density)
        .zip(&posterior.grid.weights)
    {
        if *p == 0.0 {
            continue;
        }
        if *q == 0.0 {
            return Err(Error::InvalidArgument(
                "prior vanishes where posterior has mass".into(),
            ));
        }
        acc += w * p * (p / q).ln();
    }
    Ok(acc.max(0.0))
}

/// The regularizer the entropy-constrained reading of the focal
/// objective induces: KL from `posterior` to the Gibbs density at
/// inverse temperature `beta` over the same loss values.
pub fn focal_regularizer_kl(
    posterior: &GridDensity,
    beta: f64,
    loss: &[f64],
) -> Result<f64> {
    let prior = maxwell_boltzmann_density(loss, &posterior.grid, beta)?;
    grid_kl(posterior, &prior)
}

/// KL divergence between members of a parametric family: closed form
/// for the built-ins, quadrature otherwise.
pub fn kl_divergence(family: &ParametricFamily, xi1: &[f64], xi2: &[f64]) -> Result<f64> {
    family.closed_form_kl(xi1, xi2)
}

/// Quadrature KL for cross-checking the closed forms.
pub fn kl_divergence_quadrature(
    family: &ParametricFamily,
    xi1: &[f64],
    xi2: &[f64],
    points: usize,
) -> Result<f64> {
    family.validate_params(xi1)?;
    family.validate_params(xi2)?;
    let (xs, ws) = family.quadrature(xi1, points);
    Ok(xs
        .iter()
        .zip(&ws)
        .map(|(&x, &w)| {
            let p = family.density(x, xi1);
            w * p * (family.log_density(x, xi1) - family.log_density(x, xi2))
        })
        .sum())
}

/// Second-order KL approximation `1/2 sum_ij g_ij d_i d_j` around the
/// base point whose Fisher information is `fisher`. Exact for
/// equal-variance Gaussian mean shifts.
pub fn kl_quadratic_approx(fisher: &Matrix, delta_xi: &[f64]) -> Result<f64> {
    if !fisher.is_square() || fisher.rows() != delta_xi.len() {
        return Err(Error::Shape("Fisher/delta shape mismatch".into()));
    }
    let hv = fisher.matvec(delta_xi)?;
    Ok(0.5 * crate::numkit::dot(delta_xi, &hv))
}
