//! Reverse-mode differentiation over scalar computation graphs.
//!
//! Supported primitives: add, sub, mul, div, neg, exp, ln, tanh,
//! sigmoid, max, and `powf` with a constant exponent. Losses clamp
//! probabilities to at least [`LN_GUARD`] before taking logs.

mod oracle;
mod tape;

pub use oracle::{
    exact_hessian, fd, gradient, hessian_quadratic_form_nodes, hvp, value, value_and_gradient,
    DenseHvp, HvpMap, HvpOracle, DENSE_HESSIAN_CAP,
};
pub use tape::{NodeId, Tape, LN_GUARD};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{norm, Matrix, RngStream};

    #[test]
    fn gradient_quadratic() {
        // f = x^2 + y^2 at (1, 2) -> (2, 4)
        let g = gradient(
            |t, ids| {
                let a = t.mul(ids[0], ids[0]);
                let b = t.mul(ids[1], ids[1]);
                t.add(a, b)
            },
            &[1.0, 2.0],
        )
        .unwrap();
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = gradient(|t, _ids| t.constant(5.0), &[1.0, -1.0, 3.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_cubic_hand() {
        // f = x^2 y at (2, 3) -> (12, 4)
        let g = gradient(
            |t, ids| {
                let x2 = t.mul(ids[0], ids[0]);
                t.mul(x2, ids[1])
            },
            &[2.0, 3.0],
        )
        .unwrap();
        assert_eq!(g, vec![12.0, 4.0]);
    }

    fn quad_form(t: &mut Tape, ids: &[NodeId], a: &[[f64; 2]; 2]) -> NodeId {
        // 1/2 theta^T A theta
        let mut terms = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                let prod = t.mul(ids[i], ids[j]);
                let scaled = t.mul_const(prod, 0.5 * a[i][j]);
                terms.push(scaled);
            }
        }
        t.sum(&terms)
    }

    #[test]
    fn hvp_quadratic_is_av() {
        let a = [[2.0, 0.0], [0.0, 6.0]];
        let hv = hvp(|t, ids| quad_form(t, ids, &a), &[0.3, -0.7], &[1.0, 1.0]).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-12);
        assert!((hv[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn hvp_zero_vector() {
        let a = [[2.0, 1.0], [1.0, 6.0]];
        let hv = hvp(|t, ids| quad_form(t, ids, &a), &[0.3, -0.7], &[0.0, 0.0]).unwrap();
        assert_eq!(hv, vec![0.0, 0.0]);
    }

    #[test]
    fn hvp_cubic_hand() {
        // f = x^2 y, H = [[2y, 2x], [2x, 0]] = [[6,4],[4,0]] at (2,3)
        let hv = hvp(
            |t, ids| {
                let x2 = t.mul(ids[0], ids[0]);
                t.mul(x2, ids[1])
            },
            &[2.0, 3.0],
            &[1.0, 0.0],
        )
        .unwrap();
        assert!((hv[0] - 6.0).abs() < 1e-12);
        assert!((hv[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn exact_hessian_matches_hand_values() {
        let h = exact_hessian(
            |t, ids| {
                let x2 = t.mul(ids[0], ids[0]);
                t.mul(x2, ids[1])
            },
            &[2.0, 3.0],
        )
        .unwrap();
        assert!((h.get(0, 0) - 6.0).abs() < 1e-12);
        assert!((h.get(0, 1) - 4.0).abs() < 1e-12);
        assert!((h.get(1, 0) - 4.0).abs() < 1e-12);
        assert!(h.get(1, 1).abs() < 1e-12);
    }

    #[test]
    fn exact_hessian_linear_is_zero() {
        let h = exact_hessian(
            |t, ids| {
                let a = t.mul_const(ids[0], 3.0);
                let b = t.mul_const(ids[1], -2.0);
                t.add(a, b)
            },
            &[1.0, 5.0],
        )
        .unwrap();
        assert_eq!(h, Matrix::zeros(2, 2));
    }

    #[test]
    fn exact_hessian_rejects_large_dimension() {
        let theta = vec![0.0; DENSE_HESSIAN_CAP + 1];
        let err = exact_hessian(|t, ids| t.mul(ids[0], ids[0]), &theta);
        assert!(err.is_err());
    }

    fn transcendental(t: &mut Tape, ids: &[NodeId]) -> NodeId {
        // exp(x) * tanh(y) + ln(1 + sigmoid(x y)) + max(x, y)^2
        let e = t.exp(ids[0]);
        let th = t.tanh(ids[1]);
        let a = t.mul(e, th);
        let xy = t.mul(ids[0], ids[1]);
        let s = t.sigmoid(xy);
        let one = t.constant(1.0);
        let sp = t.add(one, s);
        let l = t.ln(sp);
        let m = t.max(ids[0], ids[1]);
        let m2 = t.mul(m, m);
        let ab = t.add(a, l);
        t.add(ab, m2)
    }

    #[test]
    fn gradient_matches_finite_differences_on_transcendental() {
        let mut rng = RngStream::new(11);
        for _ in 0..50 {
            let theta = [rng.range(-1.5, 1.5), rng.range(-1.5, 1.5)];
            if (theta[0] - theta[1]).abs() < 1e-3 {
                continue; // stay away from the max kink
            }
            let g = gradient(transcendental, &theta).unwrap();
            let fval = |p: &[f64]| value(transcendental, p).unwrap();
            let gfd = fd::gradient(&fval, &theta);
            let diff = norm(&g.iter().zip(&gfd).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(
                diff <= 1e-6 * (1.0 + norm(&gfd)),
                "theta {theta:?}: diff {diff}"
            );
        }
    }

    #[test]
    fn hvp_consistent_with_dense_hessian() {
        let mut rng = RngStream::new(3);
        let theta = [0.4, -0.9];
        let h = exact_hessian(transcendental, &theta).unwrap();
        for _ in 0..20 {
            let v = [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)];
            let hv = hvp(transcendental, &theta, &v).unwrap();
            let dense = h.matvec(&v).unwrap();
            let diff = norm(&hv.iter().zip(&dense).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(diff <= 1e-6 * (1.0 + norm(&dense)), "diff {diff}");
        }
    }

    #[test]
    fn oracle_linearity_and_symmetry() {
        let theta = [0.2, 0.7, -0.4];
        let f = |t: &mut Tape, ids: &[NodeId]| {
            let a = t.mul(ids[0], ids[1]);
            let b = t.exp(ids[2]);
            let c = t.mul(a, b);
            let s = t.sigmoid(ids[0]);
            t.add(c, s)
        };
        let mut oracle = HvpOracle::new(f, &theta).unwrap();
        let mut rng = RngStream::new(21);
        for _ in 0..25 {
            let u: Vec<f64> = (0..3).map(|_| rng.range(-1.0, 1.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.range(-1.0, 1.0)).collect();
            let (a, b) = (rng.range(-2.0, 2.0), rng.range(-2.0, 2.0));

            let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let lhs = oracle.apply(&combo).unwrap();
            let hu = oracle.apply(&u).unwrap();
            let hv = oracle.apply(&v).unwrap();
            for i in 0..3 {
                let rhs = a * hu[i] + b * hv[i];
                assert!((lhs[i] - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            }
            // u . H v == v . H u
            let uhv: f64 = u.iter().zip(&hv).map(|(x, y)| x * y).sum();
            let vhu: f64 = v.iter().zip(&hu).map(|(x, y)| x * y).sum();
            assert!((uhv - vhu).abs() <= 1e-8 * (1.0 + uhv.abs()));
        }
    }

    #[test]
    fn oracle_matches_fd_of_gradients() {
        let theta = [0.3, -0.2];
        let mut oracle = HvpOracle::new(transcendental, &theta).unwrap();
        let grad_fn = |p: &[f64]| gradient(transcendental, p).unwrap();
        let v = [0.8, 0.6];
        let exact = oracle.apply(&v).unwrap();
        let approx = fd::hvp_from_gradient(&grad_fn, &theta, &v, 1e-6);
        for i in 0..2 {
            assert!((exact[i] - approx[i]).abs() < 1e-5 * (1.0 + approx[i].abs()));
        }
    }

    #[test]
    fn non_finite_reports_node() {
        let r = value(
            |t, ids| {
                let z = t.constant(0.0);
                t.div(ids[0], z)
            },
            &[1.0],
        );
        assert!(matches!(r, Err(crate::error::Error::NonFinite(_))));
    }

    #[test]
    fn quadratic_form_nodes_match_dense() {
        let theta = [0.5, -0.3];
        let h = exact_hessian(transcendental, &theta).unwrap();
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = theta.iter().map(|&v| tape.input(v)).collect();
        let out = transcendental(&mut tape, &ids);
        let probes = vec![vec![1.0, -1.0], vec![1.0, 1.0]];
        let qs = hessian_quadratic_form_nodes(&mut tape, out, &ids, &probes);
        for (q, v) in qs.iter().zip(&probes) {
            let hv = h.matvec(v).unwrap();
            let expected: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
            assert!((tape.value(*q) - expected).abs() < 1e-10 * (1.0 + expected.abs()));
        }
    }
}
