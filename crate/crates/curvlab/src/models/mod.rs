//! Softmax MLP classifier and labeled batches.
//!
//! Parameters live in one flat vector with a per-layer layout table, so
//! the same model drives plain forward passes, tape-built losses, and
//! the Hessian machinery without copying weights around.

mod losses;

pub use losses::{
    cross_entropy, focal_curvature_scale, focal_loss, focal_lower_bound_gap,
    focal_pointwise_gradient, focal_pointwise_gradient_plain, conditional_entropy, loss_node,
    loss_value, one_hot, trace_regularized_loss, LossSpec, PROB_CLAMP,
};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};
use serde::{Deserialize, Serialize};

/// Hidden-layer activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    fn apply_node(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSlice {
    w_off: usize,
    b_off: usize,
    inputs: usize,
    outputs: usize,
}

/// Fully connected classifier with softmax output.
///
/// `widths` is `[input, hidden..., classes]`; the parameter count is
/// the sum of `(w_in + 1) * w_out` over layers.
#[derive(Clone, Debug)]
pub struct MlpModel {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    layers: Vec<LayerSlice>,
}

impl MlpModel {
    /// Zero-initialized model (softmax of zeros is the uniform row).
    pub fn new(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("zero layer width".into()));
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for w in widths.windows(2) {
            let (inputs, outputs) = (w[0], w[1]);
            layers.push(LayerSlice {
                w_off: off,
                b_off: off + inputs * outputs,
                inputs,
                outputs,
            });
            off += (inputs + 1) * outputs;
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            params: vec![0.0; off],
            layers,
        })
    }

    /// Xavier-uniform weight init, zero biases, drawn from `rng`.
    pub fn with_random_init(
        widths: &[usize],
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut model = Self::new(widths, activation)?;
        for layer in &model.layers.clone() {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for k in 0..layer.inputs * layer.outputs {
                model.params[layer.w_off + k] = rng.range(-bound, bound);
            }
        }
        Ok(model)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Raw logits for one input row, reading weights from `params`.
    fn logits_into(&self, params: &[f64], x: &[f64], buf_a: &mut Vec<f64>, buf_b: &mut Vec<f64>) {
        buf_a.clear();
        buf_a.extend_from_slice(x);
        for (idx, layer) in self.layers.iter().enumerate() {
            buf_b.clear();
            for j in 0..layer.outputs {
                let mut acc = params[layer.b_off + j];
                for (k, h) in buf_a.iter().enumerate() {
                    acc += params[layer.w_off + k * layer.outputs + j] * h;
                }
                if idx + 1 < self.layers.len() {
                    acc = self.activation.apply(acc);
                }
                buf_b.push(acc);
            }
            std::mem::swap(buf_a, buf_b);
        }
    }

    /// Softmax probabilities for a batch of inputs, one row per sample.
    /// Rows lie in (0,1) and sum to 1 within 1e-12.
    pub fn forward_probs(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "model expects input width {}, batch has {}",
                self.input_dim(),
                inputs.cols()
            )));
        }
        let c = self.classes();
        let mut out = Matrix::zeros(inputs.rows(), c);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for i in 0..inputs.rows() {
            self.logits_into(&self.params, inputs.row(i), &mut a, &mut b);
            let m = a.iter().fold(f64::NEG_INFINITY, |acc, &z| acc.max(z));
            let mut sum = 0.0;
            for j in 0..c {
                let e = (a[j] - m).exp();
                out.set(i, j, e);
                sum += e;
            }
            for j in 0..c {
                out.set(i, j, out.get(i, j) / sum);
            }
        }
        Ok(out)
    }

    /// Builds logits for one sample on the tape with parameters taken
    /// from `theta` (length `param_count`).
    pub(crate) fn logits_node(&self, tape: &mut Tape, theta: &[NodeId], x: &[f64]) -> Vec<NodeId> {
        let mut h: Vec<NodeId> = x.iter().map(|&v| tape.constant(v)).collect();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.outputs);
            for j in 0..layer.outputs {
                let mut acc = theta[layer.b_off + j];
                for (k, &hk) in h.iter().enumerate() {
                    let prod = tape.mul(theta[layer.w_off + k * layer.outputs + j], hk);
                    acc = tape.add(acc, prod);
                }
                if idx + 1 < self.layers.len() {
                    acc = self.activation.apply_node(tape, acc);
                }
                next.push(acc);
            }
            h = next;
        }
        h
    }
}

/// A batch of inputs with integer labels and optional soft targets.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    inputs: Matrix,
    labels: Vec<usize>,
    classes: usize,
    soft_targets: Option<Matrix>,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            soft_targets: None,
        })
    }

    /// Attaches row-stochastic soft targets (rows must sum to 1 within 1e-9).
    pub fn with_soft_targets(mut self, targets: Matrix) -> Result<Self> {
        if targets.rows() != self.n() || targets.cols() != self.classes {
            return Err(Error::Shape("soft target shape mismatch".into()));
        }
        for i in 0..targets.rows() {
            let s: f64 = targets.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "soft target row {i} sums to {s}"
                )));
            }
        }
        self.soft_targets = Some(targets);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.inputs.rows()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn soft_targets(&self) -> Option<&Matrix> {
        self.soft_targets.as_ref()
    }

    /// One-hot targets from labels, or the attached soft targets.
    pub fn targets(&self) -> Result<Matrix> {
        match &self.soft_targets {
            Some(t) => Ok(t.clone()),
            None => one_hot(&self.labels, self.classes),
        }
    }

    /// New batch holding the selected rows.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| self.inputs.row(i).to_vec())
            .collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut out = LabeledBatch::new(Matrix::from_rows(&rows)?, labels, self.classes)?;
        if let Some(t) = &self.soft_targets {
            let trows: Vec<Vec<f64>> = indices.iter().map(|&i| t.row(i).to_vec()).collect();
            out = out.with_soft_targets(Matrix::from_rows(&trows)?)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_uniform_rows() {
        let model = MlpModel::new(&[2, 3, 4], Activation::Tanh).unwrap();
        let inputs = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.1]]).unwrap();
        let probs = model.forward_probs(&inputs).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert!((probs.get(i, j) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn param_count_matches_layout() {
        let model = MlpModel::new(&[2, 16, 16, 2], Activation::Tanh).unwrap();
        assert_eq!(model.param_count(), (2 + 1) * 16 + (16 + 1) * 16 + (16 + 1) * 2);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = RngStream::new(4);
        let model = MlpModel::with_random_init(&[3, 5, 4], Activation::Sigmoid, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.range(-2.0, 2.0)).collect())
            .collect();
        let probs = model.forward_probs(&Matrix::from_rows(&rows).unwrap()).unwrap();
        for i in 0..probs.rows() {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(probs.row(i).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn hand_softmax_two_classes() {
        // Single linear layer turned into logits (0, ln 3) -> (0.25, 0.75).
        let mut model = MlpModel::new(&[1, 2], Activation::Tanh).unwrap();
        // Weights zero; biases produce the logits directly.
        let ln3 = 3.0_f64.ln();
        model.params_mut()[2] = 0.0; // bias class 0
        model.params_mut()[3] = ln3; // bias class 1
        let probs = model
            .forward_probs(&Matrix::from_rows(&[vec![0.0]]).unwrap())
            .unwrap();
        assert!((probs.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((probs.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rejects_width_mismatch() {
        let model = MlpModel::new(&[2, 3], Activation::Tanh).unwrap();
        let inputs = Matrix::zeros(1, 5);
        assert!(model.forward_probs(&inputs).is_err());
    }

    #[test]
    fn permuting_classes_permutes_columns() {
        let mut rng = RngStream::new(8);
        let model = MlpModel::with_random_init(&[2, 4, 3], Activation::Tanh, &mut rng).unwrap();
        let inputs = Matrix::from_rows(&[vec![0.3, -0.8]]).unwrap();
        let probs = model.forward_probs(&inputs).unwrap();

        // Swap the last layer's output units 0 and 2 (weights and biases).
        let mut swapped = model.clone();
        let last = *swapped.layers.last().unwrap();
        for k in 0..last.inputs {
            swapped
                .params
                .swap(last.w_off + k * last.outputs, last.w_off + k * last.outputs + 2);
        }
        swapped.params.swap(last.b_off, last.b_off + 2);
        let probs2 = swapped.forward_probs(&inputs).unwrap();
        assert!((probs.get(0, 0) - probs2.get(0, 2)).abs() < 1e-15);
        assert!((probs.get(0, 2) - probs2.get(0, 0)).abs() < 1e-15);
        assert!((probs.get(0, 1) - probs2.get(0, 1)).abs() < 1e-15);
    }
}
