//! Synthetic 2-D classification datasets and the 70/15/15 split.

use crate::error::{Error, Result};
use crate::models::LabeledBatch;
use crate::numkit::{Matrix, RngStream};
use serde::{Deserialize, Serialize};

const LBL_GENERATE: u64 = 0x6d61;
const LBL_SPLIT: u64 = 0x7370;

/// Dataset generator id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorId {
    GaussianMixture2d,
    TwoArcs2d,
}

/// Reproducible synthetic dataset description: identical fields give an
/// identical dataset on every platform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: GeneratorId,
    pub n: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::config("dataset.n", "need at least 10 samples"));
        }
        if self.classes < 2 {
            return Err(Error::config("dataset.classes", "need at least 2 classes"));
        }
        if self.generator == GeneratorId::TwoArcs2d && self.classes != 2 {
            return Err(Error::config(
                "dataset.classes",
                "two_arcs_2d is a binary task",
            ));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::config("dataset.noise", "noise must be >= 0"));
        }
        Ok(())
    }
}

/// Generates the full dataset. Labels are assigned round-robin, so
/// classes stay balanced within one sample.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<LabeledBatch> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed).substream(LBL_GENERATE);
    let mut rows = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % spec.classes;
        let point = match spec.generator {
            GeneratorId::GaussianMixture2d => {
                let angle = 2.0 * std::f64::consts::PI * class as f64 / spec.classes as f64;
                let cx = 1.5 * angle.cos();
                let cy = 1.5 * angle.sin();
                vec![cx + spec.noise * rng.normal(), cy + spec.noise * rng.normal()]
            }
            GeneratorId::TwoArcs2d => {
                let t = std::f64::consts::PI * rng.uniform();
                let (x, y) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                vec![x + spec.noise * rng.normal(), y + spec.noise * rng.normal()]
            }
        };
        rows.push(point);
        labels.push(class);
    }
    LabeledBatch::new(Matrix::from_rows(&rows)?, labels, spec.classes)
}

/// Train/validation/test split.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: LabeledBatch,
    pub val: LabeledBatch,
    pub test: LabeledBatch,
}

/// Shuffled 70/15/15 split keyed by `seed` (use the dataset seed so
/// every run over one dataset sees the same partition).
pub fn split_dataset(batch: &LabeledBatch, seed: u64) -> Result<SplitData> {
    let n = batch.n();
    if n < 10 {
        return Err(Error::InvalidArgument("dataset too small to split".into()));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    RngStream::new(seed).substream(LBL_SPLIT).shuffle(&mut indices);
    let n_train = (n * 70) / 100;
    let n_val = (n * 15) / 100;
    let train = batch.subset(&indices[..n_train])?;
    let val = batch.subset(&indices[n_train..n_train + n_val])?;
    let test = batch.subset(&indices[n_train + n_val..])?;
    Ok(SplitData { train, val, test })
}
