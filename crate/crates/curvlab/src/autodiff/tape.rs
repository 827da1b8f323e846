//! Append-only scalar computation tape for reverse-mode differentiation.
//!
//! Nodes are stored in evaluation order, so every parent index precedes
//! its children. Two backward passes exist:
//!
//! * [`Tape::backward`] accumulates plain `f64` adjoints. It is the fast
//!   path used for first derivatives.
//! * [`Tape::grad_nodes`] records the backward pass itself as new tape
//!   nodes, so the resulting gradient entries are differentiable again.
//!   Nesting it yields exact Hessian-vector products and the
//!   Hessian-quadratic-form terms used by the trace-penalized loss.
//!
//! A tape is single-owner during an evaluation; rebuild (or
//! [`Tape::replay`]) rather than mutate a graph in place.

use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    #[inline]
    fn ix(self) -> usize {
        self.0 as usize
    }
}

/// Floor applied before `ln` inside losses; probabilities are clamped
/// into `[LN_GUARD, 1 - LN_GUARD]` so `p -> 0` and `p -> 1` stay finite.
pub const LN_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
enum Op {
    Input,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    Tanh(u32),
    Sigmoid(u32),
    Max(u32, u32),
    PowConst(u32, f64),
}

/// Scalar computation graph with values.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    // Branchless in value, stable for large |x|.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    #[inline]
    fn push(&mut self, op: Op, val: f64) -> NodeId {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        NodeId(id)
    }

    /// Leaf whose value may be reset with [`Tape::set_input`].
    pub fn input(&mut self, v: f64) -> NodeId {
        self.push(Op::Input, v)
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.push(Op::Const, v)
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> f64 {
        self.vals[id.ix()]
    }

    pub fn set_input(&mut self, id: NodeId, v: f64) {
        debug_assert!(matches!(self.ops[id.ix()], Op::Input));
        self.vals[id.ix()] = v;
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.ix()] + self.vals[b.ix()];
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.ix()] - self.vals[b.ix()];
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.ix()] * self.vals[b.ix()];
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.ix()] / self.vals[b.ix()];
        self.push(Op::Div(a.0, b.0), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.vals[a.ix()];
        self.push(Op::Neg(a.0), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.ix()].exp();
        self.push(Op::Exp(a.0), v)
    }

    /// Natural logarithm. Callers inside losses clamp the argument to at
    /// least [`LN_GUARD`] first; the op itself does not.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.ix()].ln();
        self.push(Op::Ln(a.0), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.ix()].tanh();
        self.push(Op::Tanh(a.0), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = sigmoid(self.vals[a.ix()]);
        self.push(Op::Sigmoid(a.0), v)
    }

    /// Pointwise maximum. Ties route the gradient to the first argument.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.ix()].max(self.vals[b.ix()]);
        self.push(Op::Max(a.0, b.0), v)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let na = self.neg(a);
        let nb = self.neg(b);
        let m = self.max(na, nb);
        self.neg(m)
    }

    /// `a^k` for a constant exponent `k`.
    pub fn powc(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.vals[a.ix()].powf(k);
        self.push(Op::PowConst(a.0, k), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let cn = self.constant(c);
        self.add(a, cn)
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let cn = self.constant(c);
        self.mul(a, cn)
    }

    /// Clamp into `[lo, hi]` built from max/min primitives.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let lo_n = self.constant(lo);
        let hi_n = self.constant(hi);
        let floored = self.max(a, lo_n);
        self.min(floored, hi_n)
    }

    /// Left-fold sum of `ids`; zero constant for an empty slice.
    pub fn sum(&mut self, ids: &[NodeId]) -> NodeId {
        match ids.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &id in rest {
                    acc = self.add(acc, id);
                }
                acc
            }
        }
    }

    /// Index of the first non-finite value, scanning nodes `0..=out`.
    pub fn first_non_finite(&self, out: NodeId) -> Option<usize> {
        self.vals[..=out.ix()].iter().position(|v| !v.is_finite())
    }

    /// Recomputes every non-leaf value in order. Call after
    /// [`Tape::set_input`]. `mask`, when given, limits recomputation to
    /// flagged nodes (used to replay only the input-dependent slice).
    pub fn replay(&mut self, mask: Option<&[bool]>) {
        for i in 0..self.ops.len() {
            if let Some(m) = mask {
                if !m[i] {
                    continue;
                }
            }
            let v = match self.ops[i] {
                Op::Input | Op::Const => continue,
                Op::Add(a, b) => self.vals[a as usize] + self.vals[b as usize],
                Op::Sub(a, b) => self.vals[a as usize] - self.vals[b as usize],
                Op::Mul(a, b) => self.vals[a as usize] * self.vals[b as usize],
                Op::Div(a, b) => self.vals[a as usize] / self.vals[b as usize],
                Op::Neg(a) => -self.vals[a as usize],
                Op::Exp(a) => self.vals[a as usize].exp(),
                Op::Ln(a) => self.vals[a as usize].ln(),
                Op::Tanh(a) => self.vals[a as usize].tanh(),
                Op::Sigmoid(a) => sigmoid(self.vals[a as usize]),
                Op::Max(a, b) => self.vals[a as usize].max(self.vals[b as usize]),
                Op::PowConst(a, k) => self.vals[a as usize].powf(k),
            };
            self.vals[i] = v;
        }
    }

    /// Marks every node that transitively depends on one of `inputs`.
    pub fn dependency_mask(&self, inputs: &[NodeId]) -> Vec<bool> {
        let mut mask = vec![false; self.ops.len()];
        for id in inputs {
            mask[id.ix()] = true;
        }
        for i in 0..self.ops.len() {
            let hit = match self.ops[i] {
                Op::Input | Op::Const => false,
                Op::Add(a, b)
                | Op::Sub(a, b)
                | Op::Mul(a, b)
                | Op::Div(a, b)
                | Op::Max(a, b) => mask[a as usize] || mask[b as usize],
                Op::Neg(a)
                | Op::Exp(a)
                | Op::Ln(a)
                | Op::Tanh(a)
                | Op::Sigmoid(a)
                | Op::PowConst(a, _) => mask[a as usize],
            };
            if hit {
                mask[i] = true;
            }
        }
        mask
    }

    /// Plain reverse sweep from `out`, filling `adj` with d(out)/d(node).
    /// `adj` must have length `>= self.len()`.
    pub fn backward_into(&self, out: NodeId, adj: &mut [f64]) {
        for a in adj[..=out.ix()].iter_mut() {
            *a = 0.0;
        }
        adj[out.ix()] = 1.0;
        for i in (0..=out.ix()).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a as usize] += g * self.vals[b as usize];
                    adj[b as usize] += g * self.vals[a as usize];
                }
                Op::Div(a, b) => {
                    let bv = self.vals[b as usize];
                    adj[a as usize] += g / bv;
                    adj[b as usize] -= g * self.vals[i] / bv;
                }
                Op::Neg(a) => adj[a as usize] -= g,
                Op::Exp(a) => adj[a as usize] += g * self.vals[i],
                Op::Ln(a) => adj[a as usize] += g / self.vals[a as usize],
                Op::Tanh(a) => {
                    let t = self.vals[i];
                    adj[a as usize] += g * (1.0 - t * t);
                }
                Op::Sigmoid(a) => {
                    let s = self.vals[i];
                    adj[a as usize] += g * s * (1.0 - s);
                }
                Op::Max(a, b) => {
                    if self.vals[a as usize] >= self.vals[b as usize] {
                        adj[a as usize] += g;
                    } else {
                        adj[b as usize] += g;
                    }
                }
                Op::PowConst(a, k) => {
                    if k != 0.0 {
                        adj[a as usize] += g * k * self.vals[a as usize].powf(k - 1.0);
                    }
                }
            }
        }
    }

    /// Gradient of `out` with respect to `wrt`, plain adjoints.
    pub fn backward(&self, out: NodeId, wrt: &[NodeId]) -> Vec<f64> {
        let mut adj = vec![0.0; self.len()];
        self.backward_into(out, &mut adj);
        wrt.iter().map(|id| adj[id.ix()]).collect()
    }

    /// Backward sweep recorded as tape nodes: the returned ids hold the
    /// gradient of `out` w.r.t. each `wrt` entry, and remain valid
    /// targets for further differentiation.
    ///
    /// `max` contributes a subgradient that is frozen at the values
    /// present when this is called; replays that move an argument across
    /// a tie will not update the branch.
    pub fn grad_nodes(&mut self, out: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        let upto = out.ix();
        let mut adj: Vec<Option<NodeId>> = vec![None; upto + 1];
        let one = self.constant(1.0);
        adj[upto] = Some(one);

        #[inline]
        fn accum(tape: &mut Tape, adj: &mut [Option<NodeId>], target: u32, contrib: NodeId) {
            let slot = target as usize;
            adj[slot] = Some(match adj[slot] {
                None => contrib,
                Some(prev) => tape.add(prev, contrib),
            });
        }

        for i in (0..=upto).rev() {
            let Some(g) = adj[i] else { continue };
            match self.ops[i] {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    accum(self, &mut adj, a, g);
                    accum(self, &mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    accum(self, &mut adj, a, g);
                    let ng = self.neg(g);
                    accum(self, &mut adj, b, ng);
                }
                Op::Mul(a, b) => {
                    let ca = self.mul(g, NodeId(b));
                    accum(self, &mut adj, a, ca);
                    let cb = self.mul(g, NodeId(a));
                    accum(self, &mut adj, b, cb);
                }
                Op::Div(a, b) => {
                    let ca = self.div(g, NodeId(b));
                    accum(self, &mut adj, a, ca);
                    // d(a/b)/db = -(a/b)/b, reusing the output node.
                    let g_out = self.mul(g, NodeId(i as u32));
                    let frac = self.div(g_out, NodeId(b));
                    let cb = self.neg(frac);
                    accum(self, &mut adj, b, cb);
                }
                Op::Neg(a) => {
                    let c = self.neg(g);
                    accum(self, &mut adj, a, c);
                }
                Op::Exp(a) => {
                    let c = self.mul(g, NodeId(i as u32));
                    accum(self, &mut adj, a, c);
                }
                Op::Ln(a) => {
                    let c = self.div(g, NodeId(a));
                    accum(self, &mut adj, a, c);
                }
                Op::Tanh(a) => {
                    let t = NodeId(i as u32);
                    let t2 = self.mul(t, t);
                    let one = self.constant(1.0);
                    let sech2 = self.sub(one, t2);
                    let c = self.mul(g, sech2);
                    accum(self, &mut adj, a, c);
                }
                Op::Sigmoid(a) => {
                    let s = NodeId(i as u32);
                    let one = self.constant(1.0);
                    let om = self.sub(one, s);
                    let ds = self.mul(s, om);
                    let c = self.mul(g, ds);
                    accum(self, &mut adj, a, c);
                }
                Op::Max(a, b) => {
                    if self.vals[a as usize] >= self.vals[b as usize] {
                        accum(self, &mut adj, a, g);
                    } else {
                        accum(self, &mut adj, b, g);
                    }
                }
                Op::PowConst(a, k) => {
                    if k != 0.0 {
                        let pw = self.powc(NodeId(a), k - 1.0);
                        let kn = self.constant(k);
                        let kp = self.mul(kn, pw);
                        let c = self.mul(g, kp);
                        accum(self, &mut adj, a, c);
                    }
                }
            }
        }

        wrt.iter()
            .map(|id| adj[id.ix()].unwrap_or_else(|| self.constant(0.0)))
            .collect()
    }

    /// Finite-value check for the subgraph ending at `out`.
    pub fn check_finite(&self, out: NodeId) -> Result<()> {
        match self.first_non_finite(out) {
            None => Ok(()),
            Some(idx) => Err(Error::NonFinite(format!(
                "tape node {idx} evaluated to {}",
                self.vals[idx]
            ))),
        }
    }
}
