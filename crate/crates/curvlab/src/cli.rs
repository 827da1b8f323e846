//! Command implementations behind the `curvlab` binary: strict JSON
//! configs in, CSV/JSON/JSONL out.
//!
//! Configs reject unknown keys so hyperparameter typos fail loudly,
//! and every file-producing run writes a resolved copy of its config
//! next to the outputs. All output is locale-independent (dot decimal,
//! LF newlines) and byte-stable across reruns of the same config.

use crate::calibration;
use crate::curvature::{self, CurvatureReport};
use crate::error::{Error, Result};
use crate::geometry::{
    self, christoffel, nn_manifold_jacobian_rank, riemann_tensor, volume_element,
    FisherEstimator, MetricField, ParametricFamily, DEFAULT_METRIC_STEP,
};
use crate::infobounds::{optimal_lambda, thiemann_bound, thiemann_bound_case, PacBayesCase};
use crate::numkit::{Matrix, RngStream};
use crate::trainer::{
    generate_dataset, split_dataset, sweep, train_run, AxisSpec, DatasetSpec, ModelSpec,
    TrainConfig,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs;
use std::path::Path;

/// Process exit code for configuration and validation failures.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit code for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

/// Maps an error to the documented exit code.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) | Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

/// Parses a strict-schema JSON config, reporting the dotted field path
/// on failure.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        Error::config(e.path().to_string(), e.inner().to_string())
    })
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, content)?;
    Ok(())
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numerical(format!("serialize: {e}")))
        .map(|mut s| {
            s.push('\n');
            s
        })
}

/// Config file for `curvlab train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

/// Final-row digest written as `summary.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub epochs: usize,
    pub diverged: bool,
    pub param_count: usize,
    pub final_epoch: Option<usize>,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_ece: Option<f64>,
    pub trace: Option<f64>,
    pub lambda_max: Option<f64>,
}

/// Trains per config and writes `run.jsonl`, `summary.json`, and
/// `resolved_config.json` into `out`.
pub fn cmd_train(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let mut cfg: TrainFileConfig = load_config(config_path)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    cfg.dataset.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;

    let full = generate_dataset(&cfg.dataset)?;
    let data = split_dataset(&full, cfg.dataset.seed)?;
    let outcome = train_run(&cfg.train, &cfg.model, &data)?;

    let mut jsonl = Vec::new();
    outcome.record.write_jsonl(&mut jsonl)?;
    write_text(
        &out.join("run.jsonl"),
        std::str::from_utf8(&jsonl).expect("jsonl is utf8"),
    )?;

    let last = outcome.record.rows.last();
    let summary = TrainSummary {
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
        diverged: outcome.record.diverged,
        param_count: outcome.model.param_count(),
        final_epoch: last.map(|r| r.epoch),
        train_loss: last.map(|r| r.train_loss),
        val_loss: last.map(|r| r.val_loss),
        val_acc: last.map(|r| r.val_acc),
        val_ece: last.map(|r| r.val_ece),
        trace: last.map(|r| r.trace),
        lambda_max: last.map(|r| r.lambda_max),
    };
    write_text(&out.join("summary.json"), &to_pretty_json(&summary)?)?;
    write_text(&out.join("resolved_config.json"), &to_pretty_json(&cfg)?)?;
    Ok(())
}

/// Config file for `curvlab sweep`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFileConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub template: TrainConfig,
    pub axis: AxisSpec,
    pub seeds: Vec<u64>,
}

/// Runs the sweep and writes `sweep.csv`, `aggregate.csv`, and
/// `resolved_config.json` into `out`.
pub fn cmd_sweep(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let mut cfg: SweepFileConfig = load_config(config_path)?;
    if let Some(seed) = seed_override {
        cfg.dataset.seed = seed;
    }
    let table = sweep(&cfg.template, &cfg.model, &cfg.dataset, &cfg.axis, &cfg.seeds)?;

    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write_text(&out.join("sweep.csv"), std::str::from_utf8(&csv).expect("utf8"))?;

    let mut agg = Vec::new();
    table.write_aggregate_csv(&mut agg)?;
    write_text(
        &out.join("aggregate.csv"),
        std::str::from_utf8(&agg).expect("utf8"),
    )?;
    write_text(&out.join("resolved_config.json"), &to_pretty_json(&cfg)?)?;
    Ok(())
}

/// Config file for `curvlab curvature`: a symmetric matrix, inline or
/// from a headerless CSV of rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureFileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix_csv: Option<String>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_probes() -> usize {
    1000
}

fn default_power_iters() -> usize {
    200
}

fn parse_matrix_csv(text: &str) -> Result<Matrix> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| {
            Error::config(format!("matrix_csv row {}", idx + 1), e.to_string())
        })?);
    }
    Matrix::from_rows(&rows)
}

/// Runs the estimator battery on the configured matrix and returns the
/// report as pretty JSON (also written to `out` when given).
pub fn cmd_curvature(config_path: &Path, out: Option<&Path>) -> Result<String> {
    let cfg: CurvatureFileConfig = load_config(config_path)?;
    let matrix = match (&cfg.matrix, &cfg.matrix_csv) {
        (Some(rows), None) => Matrix::from_rows(rows)?,
        (None, Some(path)) => parse_matrix_csv(&fs::read_to_string(path).map_err(|e| {
            Error::config("matrix_csv", format!("cannot read {path}: {e}"))
        })?)?,
        _ => {
            return Err(Error::config(
                "matrix",
                "provide exactly one of `matrix` or `matrix_csv`",
            ))
        }
    };
    let report: CurvatureReport =
        curvature::curvature_report(&matrix, cfg.probes, cfg.power_iters, cfg.seed)?;
    let text = to_pretty_json(&report)?;
    if let Some(dir) = out {
        write_text(&dir.join("curvature.json"), &text)?;
        write_text(&dir.join("resolved_config.json"), &to_pretty_json(&cfg)?)?;
    }
    Ok(text)
}

/// Config file for `curvlab bound`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundFileConfig {
    pub n: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub kl: f64,
    pub emp_risk: f64,
}

/// Evaluates the PAC-Bayes bound at the given rate, at the closed-form
/// optimal rate, and (optionally) against a dense grid cross-check.
pub fn cmd_bound(config_path: &Path, grid_check: bool, out: Option<&Path>) -> Result<String> {
    let cfg: BoundFileConfig = load_config(config_path)?;
    let case = PacBayesCase {
        n: cfg.n,
        epsilon: cfg.epsilon,
        lambda: cfg.lambda,
        kl: cfg.kl,
        emp_risk: cfg.emp_risk,
    };
    let bound_at_lambda = thiemann_bound_case(&case)?;
    let lambda_star = optimal_lambda(cfg.n, cfg.kl, cfg.emp_risk, cfg.epsilon)?;
    let bound_at_star = thiemann_bound(cfg.n, cfg.epsilon, lambda_star, cfg.kl, cfg.emp_risk)?;

    let mut report = json!({
        "n": cfg.n,
        "epsilon": cfg.epsilon,
        "lambda": cfg.lambda,
        "kl": cfg.kl,
        "emp_risk": cfg.emp_risk,
        "bound": bound_at_lambda,
        "optimal_lambda": lambda_star,
        "bound_at_optimal_lambda": bound_at_star,
    });
    if grid_check {
        let mut best = f64::INFINITY;
        let mut best_lambda = f64::NAN;
        let mut l = 0.01;
        while l < 1.99 {
            let b = thiemann_bound(cfg.n, cfg.epsilon, l, cfg.kl, cfg.emp_risk)?;
            if b < best {
                best = b;
                best_lambda = l;
            }
            l += 0.001;
        }
        report["grid_minimum"] = json!(best);
        report["grid_argmin"] = json!(best_lambda);
        report["grid_gap"] = json!(bound_at_star - best);
    }
    let text = to_pretty_json(&report)?;
    if let Some(dir) = out {
        write_text(&dir.join("bound.json"), &text)?;
        write_text(&dir.join("resolved_config.json"), &to_pretty_json(&cfg)?)?;
    }
    Ok(text)
}

/// Reads a predictions CSV (`p0..p{C-1},label` with a header), computes
/// the calibration report, writes `calibration_bins.csv` and
/// `calibration_summary.json` when `out` is given, and returns the
/// summary JSON.
pub fn cmd_calibrate(predictions: &Path, bins: usize, out: Option<&Path>) -> Result<String> {
    let text = fs::read_to_string(predictions).map_err(|e| {
        Error::config(
            predictions.display().to_string(),
            format!("cannot read: {e}"),
        )
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::config("predictions", "empty file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols.last() != Some(&"label") {
        return Err(Error::config(
            "predictions",
            "expected header p0,...,p{C-1},label",
        ));
    }
    let classes = cols.len() - 1;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != classes + 1 {
            return Err(Error::config(
                format!("predictions row {}", idx + 1),
                format!("expected {} fields, got {}", classes + 1, fields.len()),
            ));
        }
        let probs: std::result::Result<Vec<f64>, _> =
            fields[..classes].iter().map(|f| f.parse::<f64>()).collect();
        let probs = probs.map_err(|e| {
            Error::config(format!("predictions row {}", idx + 1), e.to_string())
        })?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|&p| p < -1e-12) {
            return Err(Error::config(
                format!("predictions row {}", idx + 1),
                format!("probabilities sum to {sum}, not 1"),
            ));
        }
        let label: usize = fields[classes].parse().map_err(|e| {
            Error::config(format!("predictions row {}", idx + 1), format!("label: {e}"))
        })?;
        if label >= classes {
            return Err(Error::config(
                format!("predictions row {}", idx + 1),
                format!("label {label} outside [0, {classes})"),
            ));
        }
        rows.push(probs);
        labels.push(label);
    }

    let probs = Matrix::from_rows(&rows)?;
    let report = calibration::ece(&probs, &labels, bins)?;
    let summary = to_pretty_json(&serde_json::json!({
        "n": report.n,
        "bins": report.bin_count,
        "ece": report.ece,
        "accuracy": report.accuracy,
    }))?;
    if let Some(dir) = out {
        let mut csv = Vec::new();
        report.write_bins_csv(&mut csv)?;
        write_text(
            &dir.join("calibration_bins.csv"),
            std::str::from_utf8(&csv).expect("utf8"),
        )?;
        write_text(&dir.join("calibration_summary.json"), &summary)?;
    }
    Ok(summary)
}

/// Everything `curvlab geometry` needs, already parsed.
#[derive(Clone, Debug)]
pub struct GeometryRequest {
    pub id: String,
    pub theta: Vec<f64>,
    pub xi: Vec<f64>,
    pub dim: usize,
    pub input_dim: usize,
    pub step: f64,
    pub seed: u64,
    pub want_christoffel: bool,
    pub want_riemann: bool,
    pub want_volume: bool,
    pub want_fisher: bool,
    pub want_rank: bool,
}

impl Default for GeometryRequest {
    fn default() -> Self {
        Self {
            id: String::new(),
            theta: Vec::new(),
            xi: Vec::new(),
            dim: 2,
            input_dim: 2,
            step: DEFAULT_METRIC_STEP,
            seed: 0,
            want_christoffel: false,
            want_riemann: false,
            want_volume: false,
            want_fisher: false,
            want_rank: false,
        }
    }
}

pub const GEOMETRY_IDS: [&str; 5] = ["euclidean", "sphere", "bernoulli", "gaussian", "nn-manifold"];

fn pad_point(theta: &[f64], dim: usize) -> Vec<f64> {
    let mut p = theta.to_vec();
    p.resize(dim, 0.0);
    p
}

/// Evaluates the requested geometry report and returns pretty JSON.
pub fn cmd_geometry(req: &GeometryRequest, out: Option<&Path>) -> Result<String> {
    let mut report = json!({ "id": req.id });

    let metric: Option<MetricField> = match req.id.as_str() {
        "euclidean" => Some(MetricField::euclidean(req.dim)),
        "sphere" => Some(MetricField::sphere()),
        "bernoulli" | "gaussian" | "nn-manifold" => None,
        other => {
            return Err(Error::config(
                "id",
                format!(
                    "unknown id `{other}`; known ids: {}",
                    GEOMETRY_IDS.join(", ")
                ),
            ))
        }
    };

    if let Some(metric) = &metric {
        let theta = pad_point(&req.theta, metric.dim());
        report["theta"] = json!(theta);
        if req.want_christoffel {
            let gamma = christoffel(metric, &theta, req.step)?;
            report["christoffel"] = json!({
                "index_order": "[upper][lower1][lower2]",
                "coefficients": gamma.to_nested(),
            });
        }
        if req.want_riemann {
            let r = riemann_tensor(metric, &theta, req.step)?;
            report["riemann"] = json!({
                "index_order": "[upper][i][j][k]",
                "components": r.to_nested(),
            });
        }
        if req.want_volume {
            report["volume_element"] = json!(volume_element(metric, &theta)?);
        }
        if req.want_fisher {
            return Err(Error::config(
                "flags",
                "fisher applies to the bernoulli/gaussian families",
            ));
        }
        if req.want_rank {
            return Err(Error::config("flags", "rank applies to nn-manifold"));
        }
    }

    match req.id.as_str() {
        "bernoulli" | "gaussian" => {
            let family = if req.id == "bernoulli" {
                ParametricFamily::Bernoulli
            } else {
                ParametricFamily::Gaussian
            };
            let xi = if req.xi.is_empty() {
                match family {
                    ParametricFamily::Bernoulli => vec![0.5],
                    _ => vec![0.0, 1.0],
                }
            } else {
                req.xi.clone()
            };
            report["xi"] = json!(xi);
            if req.want_fisher || !(req.want_christoffel || req.want_riemann || req.want_volume) {
                let g = geometry::fisher_metric(
                    &family,
                    &xi,
                    FisherEstimator::Quadrature { points: 2001 },
                    None,
                )?;
                let rows: Vec<Vec<f64>> =
                    (0..g.rows()).map(|i| g.row(i).to_vec()).collect();
                report["fisher"] = json!(rows);
            }
            if req.want_christoffel || req.want_riemann || req.want_volume || req.want_rank {
                return Err(Error::config(
                    "flags",
                    "families support the fisher flag only",
                ));
            }
        }
        "nn-manifold" => {
            let d = req.input_dim;
            let mut rng = RngStream::new(req.seed);
            let theta: Vec<f64> = (0..d).map(|_| rng.range(-1.0, 1.0)).collect();
            let theta0 = rng.range(-0.5, 0.5);
            let m = 2 * (d + 1);
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..d).map(|_| rng.range(-2.0, 2.0)).collect())
                .collect();
            let inputs = Matrix::from_rows(&rows)?;
            let rank = nn_manifold_jacobian_rank(&theta, theta0, &inputs)?;
            report["d"] = json!(d);
            report["inputs"] = json!(m);
            report["rank"] = json!(rank);
            report["full_rank"] = json!(rank == d + 1);
        }
        _ => {}
    }

    let text = to_pretty_json(&report)?;
    if let Some(dir) = out {
        write_text(&dir.join("geometry.json"), &text)?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let cfg = write_tmp(
            r#"{"dataset": {"generator": "gaussian_mixture_2d", "n": 64, "classes": 2,
                "noise": 0.3, "seed": 1, "typo_key": 4},
                "model": {"hidden": [4], "activation": "tanh"},
                "train": {"loss": {"kind": "ce"}, "optimizer": {"kind": "sgd", "eta": 0.1},
                          "batch_size": 16, "epochs": 1, "seed": 1}}"#,
        );
        let err = load_config::<TrainFileConfig>(cfg.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dataset"), "{msg}");
        assert_eq!(exit_code_for(&err), EXIT_CONFIG);
    }

    #[test]
    fn negative_gamma_names_loss_gamma() {
        let cfg: TrainFileConfig = load_config(
            write_tmp(
                r#"{"dataset": {"generator": "gaussian_mixture_2d", "n": 64, "classes": 2,
                    "noise": 0.3, "seed": 1},
                    "model": {"hidden": [4], "activation": "tanh"},
                    "train": {"loss": {"kind": "focal", "gamma": -0.5},
                              "optimizer": {"kind": "sgd", "eta": 0.1},
                              "batch_size": 16, "epochs": 1, "seed": 1}}"#,
            )
            .path(),
        )
        .unwrap();
        let err = cfg.train.validate().unwrap_err();
        assert!(err.to_string().contains("loss.gamma"));
    }

    #[test]
    fn curvature_command_reports_diagonal() {
        let cfg = write_tmp(r#"{"matrix": [[1,0,0],[0,2,0],[0,0,3]], "probes": 16, "seed": 4}"#);
        let text = cmd_curvature(cfg.path(), None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["trace"], 6.0);
        assert_eq!(v["dim"], 3);
        assert!((v["lambda_max"].as_f64().unwrap() - 3.0).abs() < 1e-8);
    }

    #[test]
    fn bound_command_zero_risk_gives_lambda_one() {
        let cfg = write_tmp(r#"{"n": 100, "epsilon": 0.05, "lambda": 1.0, "kl": 0.0, "emp_risk": 0.0}"#);
        let text = cmd_bound(cfg.path(), true, None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["optimal_lambda"], 1.0);
        assert!(v["grid_gap"].as_f64().unwrap() <= 1e-9);
    }

    #[test]
    fn geometry_unknown_id_lists_known() {
        let req = GeometryRequest {
            id: "torus".into(),
            ..Default::default()
        };
        let err = cmd_geometry(&req, None).unwrap_err().to_string();
        for id in GEOMETRY_IDS {
            assert!(err.contains(id), "{err}");
        }
    }

    #[test]
    fn geometry_euclidean_christoffel_all_zero() {
        let req = GeometryRequest {
            id: "euclidean".into(),
            want_christoffel: true,
            ..Default::default()
        };
        let text = cmd_geometry(&req, None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let coeffs = v["christoffel"]["coefficients"].as_array().unwrap();
        for block in coeffs {
            for row in block.as_array().unwrap() {
                for cell in row.as_array().unwrap() {
                    assert!(cell.as_f64().unwrap().abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn geometry_sphere_riemann_component() {
        let req = GeometryRequest {
            id: "sphere".into(),
            theta: vec![1.0],
            want_riemann: true,
            ..Default::default()
        };
        let text = cmd_geometry(&req, None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let comp = v["riemann"]["components"][0][0][1][1].as_f64().unwrap();
        let expected = 1.0_f64.sin().powi(2);
        assert!((comp - expected).abs() < 1e-3, "{comp}");
    }

    #[test]
    fn geometry_nn_manifold_rank() {
        let req = GeometryRequest {
            id: "nn-manifold".into(),
            input_dim: 2,
            want_rank: true,
            ..Default::default()
        };
        let text = cmd_geometry(&req, None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["rank"], 3);
        assert_eq!(v["full_rank"], true);
    }

    #[test]
    fn calibrate_hand_file() {
        let csv = write_tmp("p0,p1,label\n0.9,0.1,0\n0.9,0.1,1\n");
        let text = cmd_calibrate(csv.path(), 15, None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["ece"], 0.4);
        assert_eq!(v["accuracy"], 0.5);
    }

    #[test]
    fn calibrate_rejects_non_stochastic_row_with_number() {
        let csv = write_tmp("p0,p1,label\n0.9,0.3,0\n");
        let err = cmd_calibrate(csv.path(), 15, None).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }
}
