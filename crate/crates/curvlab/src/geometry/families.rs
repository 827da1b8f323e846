//! Parametric log-density families with Fisher information metrics,
//! plus the rank check on the one-layer-network parameter manifold.

use crate::autodiff::{self, NodeId, Tape};
use crate::error::{Error, Result};
use crate::numkit::{numeric_rank, sym_eigen, Matrix, RngStream, DEFAULT_RANK_TOL};

const HALF_LN_2PI: f64 = 0.9189385332046727;

/// Built-in log-density families. Parameters `xi`:
/// Bernoulli `[p]`, Gaussian `[mu, sigma]`, categorical over `k`
/// outcomes `[p_1, ..., p_{k-1}]` with `p_k` implied.
#[derive(Clone, Debug, PartialEq)]
pub enum ParametricFamily {
    Bernoulli,
    Gaussian,
    Categorical { classes: usize },
}

impl ParametricFamily {
    pub fn param_dim(&self) -> usize {
        match self {
            ParametricFamily::Bernoulli => 1,
            ParametricFamily::Gaussian => 2,
            ParametricFamily::Categorical { classes } => classes - 1,
        }
    }

    pub fn validate_params(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.param_dim() {
            return Err(Error::Shape(format!(
                "family expects {} parameters, got {}",
                self.param_dim(),
                xi.len()
            )));
        }
        match self {
            ParametricFamily::Bernoulli => {
                if !(xi[0] > 0.0 && xi[0] < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "Bernoulli p must lie in (0,1), got {}",
                        xi[0]
                    )));
                }
            }
            ParametricFamily::Gaussian => {
                if xi[1] <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "Gaussian sigma must be positive, got {}",
                        xi[1]
                    )));
                }
            }
            ParametricFamily::Categorical { classes } => {
                if *classes < 2 {
                    return Err(Error::InvalidArgument("need at least two classes".into()));
                }
                let sum: f64 = xi.iter().sum();
                if xi.iter().any(|&p| p <= 0.0) || sum >= 1.0 {
                    return Err(Error::InvalidArgument(
                        "categorical probabilities must be positive with sum below 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Log density `l(x; xi)`.
    pub fn log_density(&self, x: f64, xi: &[f64]) -> f64 {
        match self {
            ParametricFamily::Bernoulli => {
                let p = xi[0];
                x * p.ln() + (1.0 - x) * (1.0 - p).ln()
            }
            ParametricFamily::Gaussian => {
                let (mu, sigma) = (xi[0], xi[1]);
                let z = (x - mu) / sigma;
                -sigma.ln() - HALF_LN_2PI - 0.5 * z * z
            }
            ParametricFamily::Categorical { classes } => {
                let i = x as usize;
                if i + 1 < *classes {
                    xi[i].ln()
                } else {
                    (1.0 - xi.iter().sum::<f64>()).ln()
                }
            }
        }
    }

    /// Same log density built on a tape, differentiable in `xi`.
    pub fn log_density_node(&self, tape: &mut Tape, x: f64, xi: &[NodeId]) -> NodeId {
        match self {
            ParametricFamily::Bernoulli => {
                let lnp = tape.ln(xi[0]);
                let one = tape.constant(1.0);
                let q = tape.sub(one, xi[0]);
                let lnq = tape.ln(q);
                let a = tape.mul_const(lnp, x);
                let b = tape.mul_const(lnq, 1.0 - x);
                tape.add(a, b)
            }
            ParametricFamily::Gaussian => {
                let xc = tape.constant(x);
                let diff = tape.sub(xc, xi[0]);
                let z = tape.div(diff, xi[1]);
                let z2 = tape.mul(z, z);
                let half = tape.mul_const(z2, -0.5);
                let lns = tape.ln(xi[1]);
                let neg = tape.neg(lns);
                let c = tape.add_const(half, -HALF_LN_2PI);
                tape.add(neg, c)
            }
            ParametricFamily::Categorical { classes } => {
                let i = x as usize;
                if i + 1 < *classes {
                    tape.ln(xi[i])
                } else {
                    let total = tape.sum(xi);
                    let one = tape.constant(1.0);
                    let rest = tape.sub(one, total);
                    tape.ln(rest)
                }
            }
        }
    }

    /// Probability mass/density at `x`.
    pub fn density(&self, x: f64, xi: &[f64]) -> f64 {
        self.log_density(x, xi).exp()
    }

    /// Quadrature support: points and weights. Discrete families sum
    /// exactly; the Gaussian uses a trapezoid rule on `mu +- 8 sigma`.
    pub fn quadrature(&self, xi: &[f64], points: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            ParametricFamily::Bernoulli => (vec![0.0, 1.0], vec![1.0, 1.0]),
            ParametricFamily::Categorical { classes } => {
                ((0..*classes).map(|i| i as f64).collect(), vec![1.0; *classes])
            }
            ParametricFamily::Gaussian => {
                let (mu, sigma) = (xi[0], xi[1]);
                let lo = mu - 8.0 * sigma;
                let hi = mu + 8.0 * sigma;
                let n = points.max(3);
                let dx = (hi - lo) / (n - 1) as f64;
                let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
                let ws: Vec<f64> = (0..n)
                    .map(|i| if i == 0 || i == n - 1 { 0.5 * dx } else { dx })
                    .collect();
                (xs, ws)
            }
        }
    }

    /// One draw from the distribution.
    pub fn sample(&self, xi: &[f64], rng: &mut RngStream) -> f64 {
        match self {
            ParametricFamily::Bernoulli => {
                if rng.uniform() < xi[0] {
                    1.0
                } else {
                    0.0
                }
            }
            ParametricFamily::Gaussian => xi[0] + xi[1] * rng.normal(),
            ParametricFamily::Categorical { classes } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                for (i, &p) in xi.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i as f64;
                    }
                }
                (*classes - 1) as f64
            }
        }
    }

    /// Closed-form Fisher information where known (all built-ins).
    pub fn closed_form_fisher(&self, xi: &[f64]) -> Result<Matrix> {
        self.validate_params(xi)?;
        match self {
            ParametricFamily::Bernoulli => {
                let p = xi[0];
                Matrix::new(1, 1, vec![1.0 / (p * (1.0 - p))])
            }
            ParametricFamily::Gaussian => {
                let s2 = xi[1] * xi[1];
                Ok(Matrix::diag(&[1.0 / s2, 2.0 / s2]))
            }
            ParametricFamily::Categorical { .. } => {
                let d = self.param_dim();
                let pk = 1.0 - xi.iter().sum::<f64>();
                let mut g = Matrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        let mut v = 1.0 / pk;
                        if i == j {
                            v += 1.0 / xi[i];
                        }
                        g.set(i, j, v);
                    }
                }
                Ok(g)
            }
        }
    }

    /// Closed-form KL divergence `KL(xi1 || xi2)` where known.
    pub fn closed_form_kl(&self, xi1: &[f64], xi2: &[f64]) -> Result<f64> {
        self.validate_params(xi1)?;
        self.validate_params(xi2)?;
        Ok(match self {
            ParametricFamily::Bernoulli => {
                let (p, q) = (xi1[0], xi2[0]);
                p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
            }
            ParametricFamily::Gaussian => {
                let (m1, s1) = (xi1[0], xi1[1]);
                let (m2, s2) = (xi2[0], xi2[1]);
                (s2 / s1).ln() + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5
            }
            ParametricFamily::Categorical { .. } => {
                let full = |xi: &[f64]| {
                    let mut v = xi.to_vec();
                    v.push(1.0 - xi.iter().sum::<f64>());
                    v
                };
                let p = full(xi1);
                let q = full(xi2);
                p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
            }
        })
    }
}

/// How to take the expectation in the Fisher metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherEstimator {
    /// Deterministic quadrature with the given point count.
    Quadrature { points: usize },
    /// Monte Carlo over samples from the density itself.
    MonteCarlo { samples: usize },
}

/// Fisher information `g_ij(xi) = -E[d^2 l / d xi_i d xi_j]`, with the
/// per-point Hessian from autodiff. Indefinite output is rejected as a
/// sign the grid is too coarse.
pub fn fisher_metric(
    family: &ParametricFamily,
    xi: &[f64],
    estimator: FisherEstimator,
    rng: Option<&mut RngStream>,
) -> Result<Matrix> {
    family.validate_params(xi)?;
    let d = family.param_dim();
    let mut acc = Matrix::zeros(d, d);

    let mut accumulate = |x: f64, weight: f64| -> Result<()> {
        let h = autodiff::exact_hessian(
            |tape, ids| family.log_density_node(tape, x, ids),
            xi,
        )?;
        acc = acc.add(&h.scale(-weight))?;
        Ok(())
    };

    match estimator {
        FisherEstimator::Quadrature { points } => {
            let (xs, ws) = family.quadrature(xi, points);
            let mass: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(&x, &w)| w * family.density(x, xi))
                .sum();
            if (mass - 1.0).abs() > 1e-6 {
                return Err(Error::Numerical(format!(
                    "quadrature mass {mass} too far from 1; refine the grid"
                )));
            }
            for (&x, &w) in xs.iter().zip(&ws) {
                accumulate(x, w * family.density(x, xi))?;
            }
        }
        FisherEstimator::MonteCarlo { samples } => {
            let rng = rng.ok_or_else(|| {
                Error::InvalidArgument("Monte Carlo Fisher needs an rng".into())
            })?;
            if samples == 0 {
                return Err(Error::InvalidArgument("need at least one sample".into()));
            }
            for _ in 0..samples {
                let x = family.sample(xi, rng);
                accumulate(x, 1.0 / samples as f64)?;
            }
        }
    }

    let g = acc.symmetrized();
    let (evals, _) = sym_eigen(&g, 1e-6)?;
    if evals[0] <= 0.0 {
        return Err(Error::Numerical(format!(
            "Fisher estimate indefinite (min eigenvalue {}); grid too coarse",
            evals[0]
        )));
    }
    Ok(g)
}

/// Rank of the Jacobian of a one-layer sigmoid network's output with
/// respect to `(theta_0, theta)`, stacked over the input rows. The
/// partials are `y(1-y)` for the bias and `y(1-y) x_j` for the weights;
/// for inputs in general position the rank is `d + 1`.
pub fn nn_manifold_jacobian_rank(
    theta: &[f64],
    theta0: f64,
    inputs: &Matrix,
) -> Result<usize> {
    let d = theta.len();
    if inputs.cols() != d {
        return Err(Error::Shape(format!(
            "inputs have width {}, theta has dimension {d}",
            inputs.cols()
        )));
    }
    if inputs.rows() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least d + 1 = {} input rows, got {}",
            d + 1,
            inputs.rows()
        )));
    }
    let mut jac = Matrix::zeros(inputs.rows(), d + 1);
    for i in 0..inputs.rows() {
        let x = inputs.row(i);
        let z = theta0 + crate::numkit::dot(theta, x);
        let y = 1.0 / (1.0 + (-z).exp());
        let s = y * (1.0 - y);
        jac.set(i, 0, s);
        for (j, &xj) in x.iter().enumerate() {
            jac.set(i, j + 1, s * xj);
        }
    }
    numeric_rank(&jac, DEFAULT_RANK_TOL)
}
