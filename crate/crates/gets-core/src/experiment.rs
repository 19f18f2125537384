//! End-to-end experiment pipeline: train a classifier, freeze it, fit
//! calibrators on the validation mask, evaluate every metric on the
//! test mask, sweep seeds, and persist results.
//!
//! The per-run seed drives everything: dataset generation (for SBM
//! sources), the split permutation, classifier initialization and
//! dropout, and every calibrator's own streams. Nested `seed` fields
//! inside the config are overridden by the run seed so that one
//! integer reproduces a run end to end.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{
    cagcn_calibrate, ets_mix, fit_cagcn, fit_ets_weights, fit_gets, fit_temperature_scaling,
    fit_vector_scaling, gets_forward, scale_logits_by_temperature, CaGcnConfig, CalibrationError,
    GetsConfig, Temperatures,
};
use crate::data::{
    generate_sbm, generate_splits, load_dataset, load_splits, DataError, SbmConfig, SplitMasks,
};
use crate::graph::{node_degrees, normalize_adjacency, GraphDataset, NormalizedAdjacency};
use crate::matrix::Matrix;
use crate::metrics::{evaluate_calibration, CalibrationReport, MetricsError, DEFAULT_BINS};
use crate::models::{train_classifier, ModelError, TrainConfig, TrainedClassifier};

pub const CHECKPOINT_MAGIC: &str = "gnn-calibration-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const RESULTS_HEADER: &str =
    "dataset,classifier,calibrator,seed,ece,accuracy,nll,var_ece,elapsed_ms";
pub const RELIABILITY_HEADER: &str = "bin_index,count,avg_confidence,accuracy";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path} line {line}: malformed results row")]
    MalformedResults { path: PathBuf, line: usize },
    #[error("{0}: no result rows")]
    EmptyResults(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibratorKind {
    Uncal,
    Ts,
    Vs,
    Ets,
    Cagcn,
    Gets,
}

impl CalibratorKind {
    pub fn name(self) -> &'static str {
        match self {
            CalibratorKind::Uncal => "uncal",
            CalibratorKind::Ts => "ts",
            CalibratorKind::Vs => "vs",
            CalibratorKind::Ets => "ets",
            CalibratorKind::Cagcn => "cagcn",
            CalibratorKind::Gets => "gets",
        }
    }
}

impl fmt::Display for CalibratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the graph comes from: a dataset directory in the documented
/// format, or a generated SBM.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Path(PathBuf),
    Sbm(SbmConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub classifier: TrainConfig,
    pub calibrators: Vec<CalibratorKind>,
    #[serde(default)]
    pub gets: GetsConfig,
    #[serde(default = "default_bins")]
    pub bins: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.calibrators.is_empty() {
            return Err(ExperimentError::InvalidConfig(
                "at least one calibrator required".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::InvalidConfig("seeds is empty".into()));
        }
        if self.bins == 0 {
            return Err(ExperimentError::InvalidConfig("bins must be >= 1".into()));
        }
        self.classifier
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        if self.calibrators.contains(&CalibratorKind::Gets) {
            self.gets
                .validate()
                .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        }
        if let DatasetSource::Sbm(sbm) = &self.dataset {
            sbm.validate()?;
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of results.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub classifier: String,
    pub calibrator: String,
    pub seed: u64,
    pub ece: f64,
    pub accuracy: f64,
    pub nll: f64,
    pub var_ece: f64,
    pub elapsed_ms: u128,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.classifier,
            self.calibrator,
            self.seed,
            self.ece,
            self.accuracy,
            self.nll,
            self.var_ece,
            self.elapsed_ms
        )
    }

    pub fn parse(line: &str) -> Option<ResultRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return None;
        }
        Some(ResultRow {
            dataset: fields[0].to_string(),
            classifier: fields[1].to_string(),
            calibrator: fields[2].to_string(),
            seed: fields[3].parse().ok()?,
            ece: fields[4].parse().ok()?,
            accuracy: fields[5].parse().ok()?,
            nll: fields[6].parse().ok()?,
            var_ece: fields[7].parse().ok()?,
            elapsed_ms: fields[8].parse().ok()?,
        })
    }
}

/// A calibrator that failed during a run; the others continue.
#[derive(Debug, Clone)]
pub struct CalibratorFailure {
    pub calibrator: String,
    pub seed: u64,
    pub message: String,
}

/// Everything a calibrator needs: the frozen logits plus graph context
/// and the masks. Fitting sees only validation labels; evaluation uses
/// the test mask.
pub struct CalibrationInputs<'a> {
    pub graph: &'a GraphDataset,
    pub adj: &'a NormalizedAdjacency,
    pub degrees: &'a [usize],
    pub splits: &'a SplitMasks,
    pub logits: &'a Matrix,
    pub gets: &'a GetsConfig,
    pub bins: usize,
    pub seed: u64,
}

fn rows_subset(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        for j in 0..m.cols() {
            out.set(r, j, m.get(i, j));
        }
    }
    out
}

fn labels_subset(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedCheckpoint {
    pub magic: String,
    pub version: u32,
    pub calibrator: String,
    pub seed: u64,
    pub params: Vec<SavedParam>,
}

pub fn save_checkpoint(
    path: &Path,
    calibrator: &str,
    seed: u64,
    params: Vec<SavedParam>,
) -> Result<(), ExperimentError> {
    let ckpt = SavedCheckpoint {
        magic: CHECKPOINT_MAGIC.to_string(),
        version: CHECKPOINT_VERSION,
        calibrator: calibrator.to_string(),
        seed,
        params,
    };
    let text = serde_json::to_string(&ckpt).map_err(|e| ExperimentError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<SavedCheckpoint, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let ckpt: SavedCheckpoint =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if ckpt.magic != CHECKPOINT_MAGIC {
        return Err(ExperimentError::Checkpoint {
            path: path.to_path_buf(),
            message: format!("bad magic {:?}", ckpt.magic),
        });
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(ExperimentError::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "unsupported version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            ),
        });
    }
    Ok(ckpt)
}

pub fn params_to_saved(params: &crate::autodiff::ParamSet) -> Vec<SavedParam> {
    params
        .iter()
        .map(|(_, p)| SavedParam {
            name: p.name.clone(),
            rows: p.rows,
            cols: p.cols,
            values: p.value.clone(),
        })
        .collect()
}

/// Fits one calibrator on the validation mask and evaluates every
/// metric on the test mask. Returns the report plus the fitted
/// parameters worth checkpointing (empty for `uncal`).
pub fn calibrate_and_evaluate(
    kind: CalibratorKind,
    inp: &CalibrationInputs,
) -> Result<(CalibrationReport, Vec<SavedParam>), ExperimentError> {
    let g = inp.graph;
    let val_logits = rows_subset(inp.logits, &inp.splits.val);
    let val_labels = labels_subset(&g.labels, &inp.splits.val);

    let (probs, saved) = match kind {
        CalibratorKind::Uncal => (inp.logits.softmax_rows(), Vec::new()),
        CalibratorKind::Ts => {
            let ts = fit_temperature_scaling(&val_logits, &val_labels)?;
            let scaled =
                scale_logits_by_temperature(inp.logits, &Temperatures::Scalar(ts.temperature))?;
            let saved = vec![SavedParam {
                name: "temperature".into(),
                rows: 1,
                cols: 1,
                values: vec![ts.temperature],
            }];
            (scaled.softmax_rows(), saved)
        }
        CalibratorKind::Vs => {
            let vs = fit_vector_scaling(&val_logits, &val_labels)?;
            let scaled = crate::calibrate::vector_scale(inp.logits, &vs)?;
            let k = vs.t.len();
            let saved = vec![
                SavedParam {
                    name: "t".into(),
                    rows: 1,
                    cols: k,
                    values: vs.t.clone(),
                },
                SavedParam {
                    name: "b".into(),
                    rows: 1,
                    cols: k,
                    values: vs.b.clone(),
                },
            ];
            (scaled.softmax_rows(), saved)
        }
        CalibratorKind::Ets => {
            let ts = fit_temperature_scaling(&val_logits, &val_labels)?;
            let ets = fit_ets_weights(&val_logits, &val_labels, ts.temperature)?;
            let saved = vec![
                SavedParam {
                    name: "temperature".into(),
                    rows: 1,
                    cols: 1,
                    values: vec![ets.temperature],
                },
                SavedParam {
                    name: "weights".into(),
                    rows: 1,
                    cols: 3,
                    values: ets.weights.to_vec(),
                },
            ];
            (ets_mix(inp.logits, &ets)?, saved)
        }
        CalibratorKind::Cagcn => {
            let cfg = CaGcnConfig {
                seed: inp.seed,
                ..CaGcnConfig::default()
            };
            let cal = fit_cagcn(inp.adj, inp.logits, &g.labels, &inp.splits.val, &cfg)?;
            let scaled = cagcn_calibrate(&cal, inp.adj, inp.logits)?;
            (scaled.softmax_rows(), params_to_saved(&cal.params))
        }
        CalibratorKind::Gets => {
            let cfg = GetsConfig {
                seed: inp.seed,
                ..inp.gets.clone()
            };
            let cal = fit_gets(
                inp.adj,
                inp.logits,
                &g.features,
                inp.degrees,
                &g.labels,
                &inp.splits.val,
                &cfg,
            )?;
            let (scaled, _) =
                gets_forward(&cal, inp.adj, inp.logits, &g.features, inp.degrees, false)?;
            (scaled.softmax_rows(), params_to_saved(&cal.params))
        }
    };

    let report = evaluate_calibration(&probs, &g.labels, inp.degrees, &inp.splits.test, inp.bins)?;
    Ok((report, saved))
}

/// Dataset + splits + trained classifier for one seed.
pub struct PreparedRun {
    pub graph: GraphDataset,
    pub adj: NormalizedAdjacency,
    pub degrees: Vec<usize>,
    pub splits: SplitMasks,
    pub classifier: TrainedClassifier,
}

/// Loads or generates the dataset, resolves splits (stored splits in
/// the dataset directory win over generated ones), and trains the
/// classifier with the run seed.
pub fn prepare_run(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedRun, ExperimentError> {
    let (graph, stored_splits) = match &cfg.dataset {
        DatasetSource::Path(dir) => {
            let g = load_dataset(dir)?;
            let splits = match load_splits(dir, seed, g.num_nodes) {
                Ok(s) => Some(s),
                Err(DataError::Io { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            (g, splits)
        }
        DatasetSource::Sbm(sbm) => {
            let mut sbm = sbm.clone();
            sbm.seed = seed;
            (generate_sbm(&sbm)?, None)
        }
    };
    let splits = match stored_splits {
        Some(s) => s,
        None => generate_splits(graph.num_nodes, seed)?,
    };
    let adj = normalize_adjacency(&graph);
    let degrees = node_degrees(&graph);
    let train_cfg = TrainConfig {
        seed,
        ..cfg.classifier.clone()
    };
    let classifier = train_classifier(&graph, &adj, &splits, &train_cfg)?;
    Ok(PreparedRun {
        graph,
        adj,
        degrees,
        splits,
        classifier,
    })
}

/// Output of one seed: result rows in config order plus any
/// per-calibrator failures.
pub struct PipelineOutput {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CalibratorFailure>,
}

fn write_reliability(
    dir: &Path,
    calibrator: &str,
    seed: u64,
    report: &CalibrationReport,
) -> Result<(), ExperimentError> {
    let mut text = String::from(RELIABILITY_HEADER);
    text.push('\n');
    for bin in &report.bins {
        text.push_str(&format!(
            "{},{},{},{}\n",
            bin.bin_index, bin.node_count, bin.avg_confidence, bin.accuracy
        ));
    }
    let path = dir.join(format!("reliability_{calibrator}_{seed}.csv"));
    fs::write(&path, text).map_err(io_err(&path))
}

/// Full single-seed protocol: train, freeze, calibrate each requested
/// method on the validation mask, evaluate on the test mask, write
/// reliability CSVs and checkpoints into the output directory.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64) -> Result<PipelineOutput, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let run = prepare_run(cfg, seed)?;
    let inputs = CalibrationInputs {
        graph: &run.graph,
        adj: &run.adj,
        degrees: &run.degrees,
        splits: &run.splits,
        logits: &run.classifier.logits,
        gets: &cfg.gets,
        bins: cfg.bins,
        seed,
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &kind in &cfg.calibrators {
        let start = Instant::now();
        match calibrate_and_evaluate(kind, &inputs) {
            Ok((report, saved)) => {
                let elapsed_ms = start.elapsed().as_millis();
                write_reliability(&cfg.output_dir, kind.name(), seed, &report)?;
                if !saved.is_empty() {
                    let path = cfg
                        .output_dir
                        .join(format!("checkpoint_{}_{seed}.json", kind.name()));
                    save_checkpoint(&path, kind.name(), seed, saved)?;
                }
                rows.push(ResultRow {
                    dataset: run.graph.name.clone(),
                    classifier: "gcn".into(),
                    calibrator: kind.name().into(),
                    seed,
                    ece: report.ece,
                    accuracy: report.accuracy,
                    nll: report.nll,
                    var_ece: report.var_ece,
                    elapsed_ms,
                });
            }
            Err(e) => failures.push(CalibratorFailure {
                calibrator: kind.name().into(),
                seed,
                message: e.to_string(),
            }),
        }
    }
    Ok(PipelineOutput { rows, failures })
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<(), ExperimentError> {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == RESULTS_HEADER => {}
        _ => {
            return Err(ExperimentError::MalformedResults {
                path: path.to_path_buf(),
                line: 1,
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = ResultRow::parse(line).ok_or(ExperimentError::MalformedResults {
            path: path.to_path_buf(),
            line: idx + 1,
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ExperimentError::EmptyResults(path.to_path_buf()));
    }
    Ok(rows)
}

/// "mean ± sample std", two decimals; a single value reports std 0.00.
pub fn format_mean_std(values: &[f64]) -> String {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    format!("{mean:.2} ± {std:.2}")
}

/// Aggregated per-calibrator table over seeds, ECE-family columns as
/// percentages, calibrators in first-appearance order.
pub fn aggregate_table(rows: &[ResultRow]) -> String {
    let mut order: Vec<&str> = Vec::new();
    for row in rows {
        if !order.contains(&row.calibrator.as_str()) {
            order.push(&row.calibrator);
        }
    }
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>16} {:>16} {:>16} {:>16}\n",
        "calibrator", "ece %", "accuracy %", "nll", "var_ece x100"
    ));
    for name in order {
        let group: Vec<&ResultRow> = rows.iter().filter(|r| r.calibrator == name).collect();
        let pct = |f: fn(&ResultRow) -> f64| {
            format_mean_std(&group.iter().map(|r| f(r) * 100.0).collect::<Vec<_>>())
        };
        let raw = |f: fn(&ResultRow) -> f64| {
            format_mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        out.push_str(&format!(
            "{:<10} {:>16} {:>16} {:>16} {:>16}\n",
            name,
            pct(|r| r.ece),
            pct(|r| r.accuracy),
            raw(|r| r.nll),
            pct(|r| r.var_ece),
        ));
    }
    out
}

/// Sweep output: every row, every failure, and the rendered table.
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CalibratorFailure>,
    pub table: String,
}

/// Runs the pipeline for every configured seed (in order), writes
/// results.csv, and aggregates.
pub fn sweep_seeds(cfg: &ExperimentConfig) -> Result<SweepOutput, ExperimentError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let mut out = run_pipeline(cfg, seed)?;
        rows.append(&mut out.rows);
        failures.append(&mut out.failures);
    }
    write_results_csv(&cfg.output_dir.join("results.csv"), &rows)?;
    let table = aggregate_table(&rows);
    Ok(SweepOutput {
        rows,
        failures,
        table,
    })
}

/// Renders the aggregate table for an existing results.csv and lists
/// the reliability files next to it.
pub fn report(results_path: &Path) -> Result<String, ExperimentError> {
    let rows = read_results_csv(results_path)?;
    let mut out = aggregate_table(&rows);
    if let Some(dir) = results_path.parent() {
        let mut reliability: Vec<String> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("reliability_") && n.ends_with(".csv"))
            .collect();
        reliability.sort();
        if !reliability.is_empty() {
            out.push_str("\nreliability files:\n");
            for name in reliability {
                out.push_str(&format!("  {name}\n"));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    #[test]
    fn mean_std_formatting() {
        assert_eq!(format_mean_std(&[2.0, 4.0]), "3.00 ± 1.41");
        assert_eq!(format_mean_std(&[2.0]), "2.00 ± 0.00");
    }

    #[test]
    fn config_json_round_trip_and_unknown_key_rejection() {
        let json = r#"{
            "dataset": {"sbm": {"num_blocks": 2, "nodes_per_block": 10,
                         "p_in": 0.5, "p_out": 0.1, "feature_dim": 4,
                         "feature_signal": 2.0}},
            "calibrators": ["uncal", "ts", "gets"],
            "seeds": [0, 1],
            "output_dir": "/tmp/out"
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.bins, 10);
        assert_eq!(cfg.calibrators.len(), 3);

        let bad = json.replace("\"seeds\"", "\"sedes\"");
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn result_row_csv_round_trip() {
        let row = ResultRow {
            dataset: "tiny".into(),
            classifier: "gcn".into(),
            calibrator: "ts".into(),
            seed: 3,
            ece: 0.12345,
            accuracy: 0.875,
            nll: 0.3219,
            var_ece: 0.00001,
            elapsed_ms: 42,
        };
        let parsed = ResultRow::parse(&row.to_csv()).unwrap();
        assert_eq!(parsed, row);
    }

    #[test]
    fn checkpoint_round_trip_and_magic_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint_ts_0.json");
        let params = vec![SavedParam {
            name: "temperature".into(),
            rows: 1,
            cols: 1,
            values: vec![1.5],
        }];
        save_checkpoint(&path, "ts", 0, params).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.calibrator, "ts");
        assert_eq!(ckpt.params[0].values, vec![1.5]);

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace(CHECKPOINT_MAGIC, "something-else")).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ExperimentError::Checkpoint { .. })
        ));
    }

    /// Validation logits z = [ln 4, 0] with four label-0 rows and one
    /// label-1 row put the NLL optimum exactly at T = 1, so the ts row
    /// must match the uncal row to high precision.
    #[test]
    fn ts_matches_uncal_when_optimal_temperature_is_one() {
        let n = 10;
        let a = 4.0_f64.ln();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..5 {
            rows.push(vec![a, 0.0]);
            labels.push(if i < 4 { 0 } else { 1 });
        }
        for i in 0..5 {
            rows.push(vec![0.4 + 0.1 * i as f64, 0.2]);
            labels.push(i % 2);
        }
        let logits = Matrix::from_rows(&rows);
        let g = build_graph(&[], n, Matrix::zeros(n, 1), labels, 2, "t").unwrap();
        let adj = normalize_adjacency(&g);
        let degrees = node_degrees(&g);
        let splits = SplitMasks {
            train: vec![],
            val: (0..5).collect(),
            test: (5..10).collect(),
            seed: 0,
        };
        let gets = GetsConfig::default();
        let inputs = CalibrationInputs {
            graph: &g,
            adj: &adj,
            degrees: &degrees,
            splits: &splits,
            logits: &logits,
            gets: &gets,
            bins: 5,
            seed: 0,
        };
        let (uncal, _) = calibrate_and_evaluate(CalibratorKind::Uncal, &inputs).unwrap();
        let (ts, saved) = calibrate_and_evaluate(CalibratorKind::Ts, &inputs).unwrap();
        // Golden-section localizes the optimum to ~sqrt(eps) in tau,
        // so the fitted T itself is only good to ~1e-8.
        assert!(
            (saved[0].values[0] - 1.0).abs() < 1e-6,
            "fitted T {} not near 1",
            saved[0].values[0]
        );
        assert!((uncal.ece - ts.ece).abs() < 1e-9);
        assert_eq!(uncal.accuracy, ts.accuracy);
        assert!((uncal.nll - ts.nll).abs() < 1e-9);
    }

    #[test]
    fn aggregate_orders_by_first_appearance() {
        let mk = |cal: &str, seed: u64, ece: f64| ResultRow {
            dataset: "d".into(),
            classifier: "gcn".into(),
            calibrator: cal.into(),
            seed,
            ece,
            accuracy: 0.9,
            nll: 0.4,
            var_ece: 0.0001,
            elapsed_ms: 1,
        };
        let rows = vec![
            mk("uncal", 0, 0.2),
            mk("ts", 0, 0.1),
            mk("uncal", 1, 0.3),
            mk("ts", 1, 0.2),
        ];
        let table = aggregate_table(&rows);
        let uncal_pos = table.find("uncal").unwrap();
        let ts_pos = table.find("\nts").unwrap();
        assert!(uncal_pos < ts_pos);
        assert!(table.contains("25.00 ± 7.07"));
    }
}
