//! Gradients, Hessian-vector products, and dense Hessians over tapes.
//!
//! The Hessian-vector product is reverse-over-reverse: the directional
//! derivative `<grad f, v>` is built with [`Tape::grad_nodes`] and
//! differentiated once more, which is exact to machine precision. The
//! finite-difference variants in [`crate::autodiff::fd`] exist as test
//! oracles only.

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Largest parameter dimension for which a dense Hessian is materialized.
pub const DENSE_HESSIAN_CAP: usize = 2000;

/// Abstract linear map `v -> H(theta) v` around a fixed evaluation point.
/// The contract every curvature estimator consumes: implementations must
/// be linear in `v` and symmetric (`u . H v == v . H u`) up to roundoff.
pub trait HvpMap {
    fn dim(&self) -> usize;
    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Builds the graph of `f` at `theta` and returns the tape, parameter
/// node ids, and output id.
fn build<F>(f: F, theta: &[f64]) -> Result<(Tape, Vec<NodeId>, NodeId)>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = theta.iter().map(|&v| tape.input(v)).collect();
    let out = f(&mut tape, &ids);
    tape.check_finite(out)?;
    Ok((tape, ids, out))
}

/// Value of the scalar function at `theta`.
pub fn value<F>(f: F, theta: &[f64]) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> NodeId,
{
    let (tape, _, out) = build(f, theta)?;
    Ok(tape.value(out))
}

/// Value and reverse-mode gradient at `theta`.
pub fn value_and_gradient<F>(f: F, theta: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> NodeId,
{
    let (tape, ids, out) = build(f, theta)?;
    Ok((tape.value(out), tape.backward(out, &ids)))
}

/// Reverse-mode gradient at `theta`.
pub fn gradient<F>(f: F, theta: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> NodeId,
{
    value_and_gradient(f, theta).map(|(_, g)| g)
}

/// Hessian-vector product `H(theta) v` as the gradient of `<grad f, v>`
/// with `v` held constant.
pub fn hvp<F>(f: F, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> NodeId,
{
    if v.len() != theta.len() {
        return Err(Error::Shape(format!(
            "hvp: theta has dimension {}, v has {}",
            theta.len(),
            v.len()
        )));
    }
    let (mut tape, ids, out) = build(f, theta)?;
    let grads = tape.grad_nodes(out, &ids);
    let s = directional(&mut tape, &grads, v);
    tape.check_finite(s)?;
    Ok(tape.backward(s, &ids))
}

fn directional(tape: &mut Tape, grads: &[NodeId], v: &[f64]) -> NodeId {
    let terms: Vec<NodeId> = grads
        .iter()
        .zip(v)
        .map(|(&g, &vi)| tape.mul_const(g, vi))
        .collect();
    tape.sum(&terms)
}

/// Dense symmetric Hessian. Row `j` is the gradient of the `j`-th
/// gradient entry; the result is symmetrized and the pre-symmetrization
/// asymmetry must stay within `1e-8 ||H||`.
pub fn exact_hessian<F>(f: F, theta: &[f64]) -> Result<Matrix>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> NodeId,
{
    let d = theta.len();
    if d > DENSE_HESSIAN_CAP {
        return Err(Error::DimensionCap {
            dim: d,
            cap: DENSE_HESSIAN_CAP,
            hint: "use an HvpOracle instead of a dense Hessian",
        });
    }
    let (mut tape, ids, out) = build(f, theta)?;
    let grads = tape.grad_nodes(out, &ids);
    if let Some(&g0) = grads.last() {
        tape.check_finite(g0)?;
    }

    let mut h = Matrix::zeros(d, d);
    let mut adj = vec![0.0; tape.len()];
    for (j, &gj) in grads.iter().enumerate() {
        tape.backward_into(gj, &mut adj);
        for (i, &id) in ids.iter().enumerate() {
            h.set(j, i, adj[id.0 as usize]);
        }
    }
    let scale = h.frobenius_norm();
    let asymmetry = h.max_asymmetry();
    if asymmetry > 1e-8 * scale.max(1e-300) {
        return Err(Error::Numerical(format!(
            "Hessian asymmetry {asymmetry:.3e} exceeds 1e-8 * {scale:.3e}"
        )));
    }
    Ok(h.symmetrized())
}

/// Appends nodes computing `v^T H v` for each probe, where `H` is the
/// Hessian of `out` with respect to `theta`. The probes enter as
/// constants, so the returned nodes are differentiable in `theta`;
/// the shared first backward pass is built once.
pub fn hessian_quadratic_form_nodes(
    tape: &mut Tape,
    out: NodeId,
    theta: &[NodeId],
    probes: &[Vec<f64>],
) -> Vec<NodeId> {
    let grads = tape.grad_nodes(out, theta);
    probes
        .iter()
        .map(|v| {
            let s = directional(tape, &grads, v);
            let hv = tape.grad_nodes(s, theta);
            directional(tape, &hv, v)
        })
        .collect()
}

/// Reverse-over-reverse Hessian-vector oracle with a prebuilt graph.
///
/// `apply` resets the probe inputs, replays only the probe-dependent
/// slice of the tape, and runs one plain backward pass, so repeated
/// products reuse all of the forward work.
#[derive(Clone)]
pub struct HvpOracle {
    tape: Tape,
    theta_ids: Vec<NodeId>,
    probe_ids: Vec<NodeId>,
    out: NodeId,
    probe_mask: Vec<bool>,
    adj: Vec<f64>,
}

impl HvpOracle {
    /// Fixes `theta` (and whatever data `f` closes over) and prepares
    /// the map `v -> H(theta) v`.
    pub fn new<F>(f: F, theta: &[f64]) -> Result<Self>
    where
        F: FnOnce(&mut Tape, &[NodeId]) -> NodeId,
    {
        let (mut tape, theta_ids, out_f) = build(f, theta)?;
        let grads = tape.grad_nodes(out_f, &theta_ids);
        let probe_ids: Vec<NodeId> = theta.iter().map(|_| tape.input(0.0)).collect();
        let terms: Vec<NodeId> = grads
            .iter()
            .zip(&probe_ids)
            .map(|(&g, &p)| tape.mul(g, p))
            .collect();
        let out = tape.sum(&terms);
        let probe_mask = tape.dependency_mask(&probe_ids);
        let adj = vec![0.0; tape.len()];
        Ok(Self {
            tape,
            theta_ids,
            probe_ids,
            out,
            probe_mask,
            adj,
        })
    }
}

impl HvpMap for HvpOracle {
    fn dim(&self) -> usize {
        self.theta_ids.len()
    }

    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "oracle dimension {} but v has length {}",
                self.dim(),
                v.len()
            )));
        }
        for (&id, &vi) in self.probe_ids.iter().zip(v) {
            self.tape.set_input(id, vi);
        }
        self.tape.replay(Some(&self.probe_mask));
        self.tape.backward_into(self.out, &mut self.adj);
        let out: Vec<f64> = self
            .theta_ids
            .iter()
            .map(|id| self.adj[id.0 as usize])
            .collect();
        if let Some(bad) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "Hessian-vector product entry {bad} is {}",
                out[bad]
            )));
        }
        Ok(out)
    }
}

/// Hessian-vector map backed by an explicit dense matrix. Cheap when
/// the dimension allows materializing `H` once and probing many times.
#[derive(Clone, Debug)]
pub struct DenseHvp {
    h: Matrix,
}

impl DenseHvp {
    pub fn new(h: Matrix) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::Shape("DenseHvp needs a square matrix".into()));
        }
        Ok(Self { h })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.h
    }
}

impl HvpMap for DenseHvp {
    fn dim(&self) -> usize {
        self.h.rows()
    }

    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        self.h.matvec(v)
    }
}

/// Finite-difference reference oracles. Kept out of every production
/// path; tests use them to cross-check the reverse-mode results.
pub mod fd {
    /// Central-difference gradient with step `1e-5 * (1 + |theta_i|)`.
    pub fn gradient<F>(f: &F, theta: &[f64]) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut out = vec![0.0; theta.len()];
        let mut probe = theta.to_vec();
        for i in 0..theta.len() {
            let h = 1e-5 * (1.0 + theta[i].abs());
            probe[i] = theta[i] + h;
            let up = f(&probe);
            probe[i] = theta[i] - h;
            let down = f(&probe);
            probe[i] = theta[i];
            out[i] = (up - down) / (2.0 * h);
        }
        out
    }

    /// Central difference of a gradient function along `v`.
    pub fn hvp_from_gradient<G>(grad: &G, theta: &[f64], v: &[f64], h: f64) -> Vec<f64>
    where
        G: Fn(&[f64]) -> Vec<f64>,
    {
        let up: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t + h * vi).collect();
        let down: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t - h * vi).collect();
        let gu = grad(&up);
        let gd = grad(&down);
        gu.iter()
            .zip(&gd)
            .map(|(u, d)| (u - d) / (2.0 * h))
            .collect()
    }

    /// Central-difference Hessian of a scalar function, step `h` per axis.
    pub fn hessian<F>(f: &F, theta: &[f64], h: f64) -> Vec<Vec<f64>>
    where
        F: Fn(&[f64]) -> f64,
    {
        let d = theta.len();
        let mut out = vec![vec![0.0; d]; d];
        let mut p = theta.to_vec();
        let base = f(theta);
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    p[i] = theta[i] + h;
                    let fp = f(&p);
                    p[i] = theta[i] - h;
                    let fm = f(&p);
                    p[i] = theta[i];
                    out[i][i] = (fp - 2.0 * base + fm) / (h * h);
                } else {
                    p[i] = theta[i] + h;
                    p[j] = theta[j] + h;
                    let fpp = f(&p);
                    p[j] = theta[j] - h;
                    let fpm = f(&p);
                    p[i] = theta[i] - h;
                    p[j] = theta[j] + h;
                    let fmp = f(&p);
                    p[j] = theta[j] - h;
                    let fmm = f(&p);
                    p[i] = theta[i];
                    p[j] = theta[j];
                    out[i][j] = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                }
            }
        }
        out
    }
}
