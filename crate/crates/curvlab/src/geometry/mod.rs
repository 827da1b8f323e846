//! Numerical Riemannian geometry: metric fields, Christoffel symbols,
//! curvature tensors, covariant and dual Hessians, and volume elements.
//!
//! Index convention, used verbatim in the tests: connection
//! coefficients are stored as `gamma[upper][lower1][lower2]` and the
//! curvature tensor as `r[upper][i][j][k]` with
//!
//! ```text
//! R^r_ijk = d_i G^r_jk - d_j G^r_ik + G^r_il G^l_jk - G^r_jl G^l_ik
//! ```
//!
//! so the first two lower indices are the antisymmetric derivative
//! pair. All metric derivatives are central differences with one
//! Richardson extrapolation level (default step `1e-4`).

mod families;

pub use families::{
    fisher_metric, nn_manifold_jacobian_rank, FisherEstimator, ParametricFamily,
};

use crate::autodiff::{self, NodeId, Tape};
use crate::error::{Error, Result};
use crate::numkit::{inverse, sym_eigen, Matrix};

/// Default finite-difference step for metric derivatives.
pub const DEFAULT_METRIC_STEP: f64 = 1e-4;

/// A field of symmetric positive definite matrices over coordinates.
pub struct MetricField {
    dim: usize,
    eval: Box<dyn Fn(&[f64]) -> Matrix + Send + Sync>,
}

impl MetricField {
    pub fn new<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(&[f64]) -> Matrix + Send + Sync + 'static,
    {
        Self {
            dim,
            eval: Box::new(eval),
        }
    }

    /// Euclidean metric: identity everywhere.
    pub fn euclidean(dim: usize) -> Self {
        Self::new(dim, move |_| Matrix::identity(dim))
    }

    /// Constant metric field.
    pub fn constant(g: Matrix) -> Self {
        let dim = g.rows();
        Self::new(dim, move |_| g.clone())
    }

    /// Round-sphere chart `diag(1, sin^2 theta_1)`. Valid away from the
    /// poles; tests keep `theta_1` inside `[0.2, pi - 0.2]`.
    pub fn sphere() -> Self {
        Self::new(2, |theta| {
            let s = theta[0].sin();
            Matrix::diag(&[1.0, s * s])
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates the metric and rejects non-symmetric or non-SPD output.
    pub fn evaluate(&self, theta: &[f64]) -> Result<Matrix> {
        if theta.len() != self.dim {
            return Err(Error::Shape(format!(
                "metric dimension {} but point has {}",
                self.dim,
                theta.len()
            )));
        }
        let g = (self.eval)(theta);
        if g.rows() != self.dim || g.cols() != self.dim {
            return Err(Error::Shape("metric evaluator returned wrong shape".into()));
        }
        let allowed = 1e-8 * (1.0 + g.max_abs());
        let asymmetry = g.max_asymmetry();
        if asymmetry > allowed {
            return Err(Error::NotSymmetric { asymmetry, allowed });
        }
        let (evals, _) = sym_eigen(&g, 1e-8)?;
        if evals[0] <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "metric not positive definite at {theta:?}: min eigenvalue {}",
                evals[0]
            )));
        }
        Ok(g)
    }
}

/// Richardson-extrapolated central difference of a matrix field.
fn matrix_partial<F>(field: &F, theta: &[f64], dir: usize, h: f64) -> Result<Matrix>
where
    F: Fn(&[f64]) -> Result<Matrix>,
{
    let diff = |s: f64| -> Result<Matrix> {
        let mut p = theta.to_vec();
        p[dir] = theta[dir] + s;
        let up = field(&p)?;
        p[dir] = theta[dir] - s;
        let down = field(&p)?;
        Ok(up.sub(&down)?.scale(1.0 / (2.0 * s)))
    };
    let coarse = diff(h)?;
    let fine = diff(h / 2.0)?;
    Ok(fine.scale(4.0 / 3.0).sub(&coarse.scale(1.0 / 3.0))?)
}

fn scalar_partial<F>(field: &F, theta: &[f64], dir: usize, h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let diff = |s: f64| -> Result<f64> {
        let mut p = theta.to_vec();
        p[dir] = theta[dir] + s;
        let up = field(&p)?;
        p[dir] = theta[dir] - s;
        let down = field(&p)?;
        Ok((up - down) / (2.0 * s))
    };
    Ok((4.0 * diff(h / 2.0)? - diff(h)?) / 3.0)
}

/// Connection coefficients `gamma[upper][lower1][lower2]` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Christoffel {
    dim: usize,
    coeffs: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            coeffs: vec![0.0; dim * dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, upper: usize, i: usize, j: usize) -> f64 {
        self.coeffs[(upper * self.dim + i) * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, upper: usize, i: usize, j: usize, v: f64) {
        self.coeffs[(upper * self.dim + i) * self.dim + j] = v;
    }

    /// Largest deviation from lower-index symmetry.
    pub fn max_torsion(&self) -> f64 {
        let mut worst = 0.0_f64;
        for l in 0..self.dim {
            for i in 0..self.dim {
                for j in (i + 1)..self.dim {
                    worst = worst.max((self.get(l, i, j) - self.get(l, j, i)).abs());
                }
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Nested `[upper][i][j]` view for serialization.
    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.dim)
            .map(|l| {
                (0..self.dim)
                    .map(|i| (0..self.dim).map(|j| self.get(l, i, j)).collect())
                    .collect()
            })
            .collect()
    }
}

/// All metric partials `d_k g` at `theta`.
fn metric_partials(metric: &MetricField, theta: &[f64], h: f64) -> Result<Vec<Matrix>> {
    let field = |p: &[f64]| metric.evaluate(p);
    (0..metric.dim())
        .map(|k| matrix_partial(&field, theta, k, h))
        .collect()
}

/// Levi-Civita coefficients
/// `G^l_ij = 1/2 g^{lk} (d_i g_jk + d_j g_ik - d_k g_ij)`
/// from central differences of the metric.
pub fn christoffel(metric: &MetricField, theta: &[f64], h: f64) -> Result<Christoffel> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let d = metric.dim();
    let g = metric.evaluate(theta)?;
    let ginv = inverse(&g)?;
    let dg = metric_partials(metric, theta, h)?;
    let mut out = Christoffel::zeros(d);
    for l in 0..d {
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += ginv.get(l, k)
                        * (dg[i].get(j, k) + dg[j].get(i, k) - dg[k].get(i, j));
                }
                out.set(l, i, j, 0.5 * acc);
            }
        }
    }
    debug_assert!(out.max_torsion() <= 1e-8 * (1.0 + out.max_abs()));
    Ok(out)
}

/// Riemann curvature coefficients `r[upper][i][j][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Riemann {
    dim: usize,
    coeffs: Vec<f64>,
}

impl Riemann {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, upper: usize, i: usize, j: usize, k: usize) -> f64 {
        self.coeffs[((upper * self.dim + i) * self.dim + j) * self.dim + k]
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        (0..self.dim)
            .map(|r| {
                (0..self.dim)
                    .map(|i| {
                        (0..self.dim)
                            .map(|j| (0..self.dim).map(|k| self.get(r, i, j, k)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Curvature tensor from the Levi-Civita connection, with the
/// Christoffel derivative taken by central differences.
pub fn riemann_tensor(metric: &MetricField, theta: &[f64], h: f64) -> Result<Riemann> {
    let d = metric.dim();
    let gamma = christoffel(metric, theta, h)?;

    // dgamma[dir] holds d(Gamma)/d(theta_dir); the inner Richardson
    // stencil evaluates christoffel at shifted points, reusing one
    // evaluation per point for all (l, i, j).
    let mut dgamma = Vec::with_capacity(d);
    for dir in 0..d {
        let diff = |s: f64| -> Result<Vec<f64>> {
            let mut p = theta.to_vec();
            p[dir] = theta[dir] + s;
            let up = christoffel(metric, &p, h)?;
            p[dir] = theta[dir] - s;
            let down = christoffel(metric, &p, h)?;
            Ok(up
                .coeffs
                .iter()
                .zip(&down.coeffs)
                .map(|(u, v)| (u - v) / (2.0 * s))
                .collect())
        };
        let coarse = diff(h)?;
        let fine = diff(h / 2.0)?;
        let coeffs = fine
            .iter()
            .zip(&coarse)
            .map(|(f, c)| (4.0 * f - c) / 3.0)
            .collect();
        dgamma.push(Christoffel { dim: d, coeffs });
    }

    let mut coeffs = vec![0.0; d * d * d * d];
    for r in 0..d {
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let mut v = dgamma[i].get(r, j, k) - dgamma[j].get(r, i, k);
                    for l in 0..d {
                        v += gamma.get(r, i, l) * gamma.get(l, j, k)
                            - gamma.get(r, j, l) * gamma.get(l, i, k);
                    }
                    coeffs[((r * d + i) * d + j) * d + k] = v;
                }
            }
        }
    }
    Ok(Riemann { dim: d, coeffs })
}

/// Covariant Hessian `H_ij = d^2 f / d theta_i d theta_j - G^k_ij d_k f`
/// with the coordinate derivatives from reverse-mode autodiff.
pub fn covariant_hessian<F>(
    f: F,
    metric: &MetricField,
    theta: &[f64],
    h: f64,
) -> Result<Matrix>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let gamma = christoffel(metric, theta, h)?;
    hessian_with_connection(f, &gamma, theta)
}

fn hessian_with_connection<F>(f: F, gamma: &Christoffel, theta: &[f64]) -> Result<Matrix>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let d = theta.len();
    let coord = autodiff::exact_hessian(&f, theta)?;
    let grad = autodiff::gradient(&f, theta)?;
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut v = coord.get(i, j);
            for k in 0..d {
                v -= gamma.get(k, i, j) * grad[k];
            }
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Solves the duality relation
/// `d_k g_ij = G_{ki,j} + G*_{kj,i}` for the dual coefficients of the
/// given primal connection, raising the result with the inverse metric.
pub fn dual_christoffel(
    metric: &MetricField,
    primal: &Christoffel,
    theta: &[f64],
    h: f64,
) -> Result<Christoffel> {
    let d = metric.dim();
    if primal.dim() != d {
        return Err(Error::Shape("primal connection dimension mismatch".into()));
    }
    let g = metric.evaluate(theta)?;
    let ginv = inverse(&g)?;
    let dg = metric_partials(metric, theta, h)?;
    // Lowered dual coefficients: G*_{kj,i} = d_k g_ij - g_lj G^l_ki.
    let mut out = Christoffel::zeros(d);
    for k in 0..d {
        for j in 0..d {
            for m in 0..d {
                let mut raised = 0.0;
                for i in 0..d {
                    let mut lowered = dg[k].get(i, j);
                    for l in 0..d {
                        lowered -= g.get(l, j) * primal.get(l, k, i);
                    }
                    raised += ginv.get(m, i) * lowered;
                }
                out.set(m, k, j, raised);
            }
        }
    }
    Ok(out)
}

/// Hessian corrected by the dual of `primal`:
/// `H*_ij = d^2 f - G*^k_ij d_k f`.
pub fn dual_hessian<F>(
    f: F,
    metric: &MetricField,
    primal: &Christoffel,
    theta: &[f64],
    h: f64,
) -> Result<Matrix>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let dual = dual_christoffel(metric, primal, theta, h)?;
    hessian_with_connection(f, &dual, theta)
}

/// Max over `i, j, k` of `|d_k g_ij - G^l_ki g_lj - G^l_kj g_il|`;
/// vanishes for a metric connection.
pub fn metric_compatibility_residual(
    metric: &MetricField,
    gamma: &Christoffel,
    theta: &[f64],
    h: f64,
) -> Result<f64> {
    let d = metric.dim();
    let g = metric.evaluate(theta)?;
    let dg = metric_partials(metric, theta, h)?;
    let mut worst = 0.0_f64;
    for k in 0..d {
        for i in 0..d {
            for j in 0..d {
                let mut v = dg[k].get(i, j);
                for l in 0..d {
                    v -= gamma.get(l, k, i) * g.get(l, j);
                    v -= gamma.get(l, k, j) * g.get(i, l);
                }
                worst = worst.max(v.abs());
            }
        }
    }
    Ok(worst)
}

/// Riemannian volume element `sqrt(det g)`.
pub fn volume_element(metric: &MetricField, theta: &[f64]) -> Result<f64> {
    let g = metric.evaluate(theta)?;
    Ok(crate::numkit::det(&g)?.sqrt())
}

/// Trace of a covariant 2-tensor against the metric: `g^{ij} t_ij`.
pub fn metric_trace(g: &Matrix, tensor: &Matrix) -> Result<f64> {
    if !g.is_square() || g.rows() != tensor.rows() || !tensor.is_square() {
        return Err(Error::Shape("metric trace shape mismatch".into()));
    }
    let ginv = inverse(g)?;
    let d = g.rows();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            acc += ginv.get(i, j) * tensor.get(i, j);
        }
    }
    Ok(acc)
}

/// Laplace-Beltrami operator
/// `(1 / sqrt(det g)) d_i ( sqrt(det g) g^{ij} d_j f )`
/// by central differences; the independent oracle for trace checks.
pub fn laplace_beltrami<F>(f: F, metric: &MetricField, theta: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId + Copy,
{
    let d = metric.dim();
    let flux = |p: &[f64], i: usize| -> Result<f64> {
        let g = metric.evaluate(p)?;
        let ginv = inverse(&g)?;
        let vol = crate::numkit::det(&g)?.sqrt();
        let grad = autodiff::gradient(f, p)?;
        let mut acc = 0.0;
        for j in 0..d {
            acc += ginv.get(i, j) * grad[j];
        }
        Ok(vol * acc)
    };
    let g0 = metric.evaluate(theta)?;
    let vol0 = crate::numkit::det(&g0)?.sqrt();
    let mut acc = 0.0;
    for i in 0..d {
        let field = |p: &[f64]| flux(p, i);
        acc += scalar_partial(&field, theta, i, h)?;
    }
    Ok(acc / vol0)
}
