//! Expected Calibration Error and reliability-bin statistics.
//!
//! Confidence is the max-class probability; bins are equal-width and
//! right-closed on (0, 1], with a confidence landing exactly on an edge
//! assigned to the lower-indexed feasible bin. Empty bins contribute
//! nothing. The default bin count is 15.

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Default reliability bin count.
pub const DEFAULT_BINS: usize = 15;

/// One reliability bin over the confidence interval `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean max-class probability of the samples in the bin.
    pub confidence: f64,
    /// Fraction of correct argmax predictions in the bin.
    pub accuracy: f64,
}

/// Binned calibration summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub bin_count: usize,
    pub ece: f64,
    pub accuracy: f64,
    pub bins: Vec<BinStat>,
}

impl CalibrationReport {
    /// CSV rows `bin_lo,bin_hi,count,conf,acc`, empty bins included.
    pub fn write_bins_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_lo,bin_hi,count,conf,acc")?;
        for b in &self.bins {
            writeln!(
                w,
                "{},{},{},{},{}",
                b.lo, b.hi, b.count, b.confidence, b.accuracy
            )?;
        }
        Ok(())
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn predicted_class(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("empty prediction set".into()));
    }
    if probs.rows() != labels.len() {
        return Err(Error::Shape("probs/labels length mismatch".into()));
    }
    let correct = (0..probs.rows())
        .filter(|&i| predicted_class(probs.row(i)) == labels[i])
        .count();
    Ok(correct as f64 / probs.rows() as f64)
}

fn bin_index(confidence: f64, bins: usize) -> usize {
    // Right-closed edges k/B: an exact edge hit belongs to the bin
    // below it.
    let scaled = confidence * bins as f64;
    let idx = scaled.ceil() as isize - 1;
    idx.clamp(0, bins as isize - 1) as usize
}

/// Binned Expected Calibration Error over row-stochastic predictions.
pub fn ece(probs: &Matrix, labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("empty prediction set".into()));
    }
    if probs.rows() != labels.len() {
        return Err(Error::Shape("probs/labels length mismatch".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    for i in 0..probs.rows() {
        let s: f64 = probs.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 || probs.row(i).iter().any(|&p| p < -1e-12) {
            return Err(Error::InvalidArgument(format!(
                "prediction row {i} is not stochastic (sum {s})"
            )));
        }
    }

    let n = probs.rows();
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for i in 0..n {
        let row = probs.row(i);
        let pred = predicted_class(row);
        let confidence = row[pred];
        let b = bin_index(confidence, bins);
        count[b] += 1;
        conf_sum[b] += confidence;
        if pred == labels[i] {
            correct[b] += 1;
        }
    }

    let mut ece_total = 0.0;
    let mut bin_stats = Vec::with_capacity(bins);
    let width = 1.0 / bins as f64;
    for b in 0..bins {
        let (conf, acc) = if count[b] > 0 {
            (
                conf_sum[b] / count[b] as f64,
                correct[b] as f64 / count[b] as f64,
            )
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            ece_total += (count[b] as f64 / n as f64) * (acc - conf).abs();
        }
        bin_stats.push(BinStat {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            count: count[b],
            confidence: conf,
            accuracy: acc,
        });
    }

    Ok(CalibrationReport {
        n,
        bin_count: bins,
        ece: ece_total,
        accuracy: accuracy(probs, labels)?,
        bins: bin_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    fn rows(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn perfect_confident_predictions_have_zero_ece() {
        let probs = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let report = ece(&probs, &[0, 1, 0], DEFAULT_BINS).unwrap();
        assert!(report.ece <= 1e-9);
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn hand_ece_point_nine_half_correct() {
        // Two rows at confidence 0.9, one correct: a single occupied
        // bin with |0.5 - 0.9| = 0.4 exactly.
        let probs = rows(&[&[0.9, 0.1], &[0.9, 0.1]]);
        let report = ece(&probs, &[0, 1], DEFAULT_BINS).unwrap();
        assert_eq!(report.ece, 0.4);
        assert_eq!(report.accuracy, 0.5);
        let occupied: Vec<&BinStat> = report.bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!(occupied[0].count, 2);
    }

    #[test]
    fn ece_with_one_bin_is_accuracy_confidence_gap() {
        let probs = rows(&[&[0.8, 0.2], &[0.6, 0.4], &[0.3, 0.7]]);
        let labels = [0usize, 1, 1];
        let report = ece(&probs, &labels, 1).unwrap();
        let mean_conf = (0.8 + 0.6 + 0.7) / 3.0;
        let acc = accuracy(&probs, &labels).unwrap();
        assert!((report.ece - (acc - mean_conf).abs()).abs() < 1e-15);
    }

    #[test]
    fn bin_counts_sum_to_n_for_any_bin_count() {
        let mut rng = RngStream::new(31);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..200 {
            let a = rng.range(0.01, 0.99);
            data.push(vec![a, 1.0 - a]);
            labels.push(rng.index(2));
        }
        let probs = Matrix::from_rows(&data).unwrap();
        for bins in [1, 2, 7, 15, 50] {
            let report = ece(&probs, &labels, bins).unwrap();
            let total: usize = report.bins.iter().map(|b| b.count).sum();
            assert_eq!(total, 200, "bins {bins}");
            assert!(report.ece >= 0.0 && report.ece <= 1.0);
        }
    }

    #[test]
    fn ece_invariant_under_sample_permutation() {
        let probs = rows(&[&[0.7, 0.3], &[0.2, 0.8], &[0.55, 0.45], &[0.9, 0.1]]);
        let labels = [0usize, 1, 1, 0];
        let a = ece(&probs, &labels, DEFAULT_BINS).unwrap();
        let probs_perm = rows(&[&[0.9, 0.1], &[0.55, 0.45], &[0.2, 0.8], &[0.7, 0.3]]);
        let labels_perm = [0usize, 1, 1, 0];
        let b = ece(&probs_perm, &labels_perm, DEFAULT_BINS).unwrap();
        assert_eq!(a.ece, b.ece);
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn edge_confidence_goes_to_lower_bin() {
        // 0.2 = 3/15 sits on the bin edge: it belongs to (2/15, 3/15].
        assert_eq!(bin_index(0.2, 15), 2);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(1.0 / 15.0 + 1e-9, 15), 1);
        assert_eq!(bin_index(0.01, 15), 0);
    }

    #[test]
    fn tie_breaks_to_lowest_class() {
        let probs = rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(predicted_class(probs.row(0)), 0);
        // Uniform two-class rows predict class 0, so accuracy is the
        // fraction of label 0.
        let acc = accuracy(&probs, &[0, 1]).unwrap();
        assert_eq!(acc, 0.5);
        let acc = accuracy(&probs, &[1, 1]).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn one_hot_all_wrong_has_zero_accuracy() {
        let probs = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(accuracy(&probs, &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn well_calibrated_generator_has_small_ece() {
        // Labels drawn from the predicted distribution itself.
        let mut rng = RngStream::new(2718);
        let n = 100_000;
        let mut data = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let p = rng.range(0.05, 0.95);
            let row = vec![p, 1.0 - p];
            let label = if rng.uniform() < p { 0 } else { 1 };
            data.push(row);
            labels.push(label);
        }
        let probs = Matrix::from_rows(&data).unwrap();
        let report = ece(&probs, &labels, DEFAULT_BINS).unwrap();
        assert!(report.ece <= 0.01, "ece {}", report.ece);
    }

    #[test]
    fn rejects_empty_and_non_stochastic() {
        assert!(ece(&Matrix::zeros(0, 2), &[], DEFAULT_BINS).is_err());
        let bad = rows(&[&[0.9, 0.3]]);
        assert!(ece(&bad, &[0], DEFAULT_BINS).is_err());
    }

    #[test]
    fn bins_csv_has_fixed_header() {
        let probs = rows(&[&[0.9, 0.1]]);
        let report = ece(&probs, &[0], 3).unwrap();
        let mut buf = Vec::new();
        report.write_bins_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,count,conf,acc\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
