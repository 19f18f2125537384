//! Dataset persistence, split generation, and the SBM generator.
//!
//! On-disk dataset format (all text, UTF-8, LF):
//!   meta.json      {"name", "num_nodes", "num_features", "num_classes"}
//!   edges.tsv      one "u<TAB>v" edge per line, 0-indexed
//!   features.csv   N lines of F comma-separated floats
//!   labels.csv     N lines, one integer in [0, K)
//!   splits/seed_<s>.csv (optional)  N lines of train|val|test

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_graph, GraphDataset, GraphError};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file} line {line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{file}: expected {expected} lines, found {got}")]
    RowCount {
        file: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{file}: {source}")]
    Json {
        file: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("split generation needs at least 10 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("refusing to overwrite {path}; pass --force to replace it")]
    AlreadyExists { path: PathBuf },
    #[error("invalid sbm config: {0}")]
    InvalidConfig(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Disjoint train/val/test node masks covering all nodes, stored
/// sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded 20/10/70 split: a shuffled permutation of [0, N) cut at
/// round(0.2 N) and round(0.1 N), remainder to test.
pub fn generate_splits(num_nodes: usize, seed: u64) -> Result<SplitMasks, DataError> {
    if num_nodes < 10 {
        return Err(DataError::TooFewNodes(num_nodes));
    }
    let mut order: Vec<usize> = (0..num_nodes).collect();
    let mut rng = rng::stream(seed, rng::STREAM_SPLITS);
    order.shuffle(&mut rng);
    let n_train = (0.2 * num_nodes as f64).round() as usize;
    let n_val = (0.1 * num_nodes as f64).round() as usize;
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitMasks {
        train,
        val,
        test,
        seed,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    name: String,
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Loads the four canonical files and validates through `build_graph`.
pub fn load_dataset(dir: &Path) -> Result<GraphDataset, DataError> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|source| DataError::Json {
        file: meta_path.clone(),
        source,
    })?;

    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for (idx, line) in read_lines(&edges_path)?.iter().enumerate() {
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|e| DataError::Parse {
                file: edges_path.clone(),
                line: idx + 1,
                message: format!("bad node id {s:?}: {e}"),
            })
        };
        let (u, v) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            file: edges_path.clone(),
            line: idx + 1,
            message: "expected two tab-separated node ids".into(),
        })?;
        edges.push((parse(u)?, parse(v)?));
    }

    let features_path = dir.join("features.csv");
    let feature_lines = read_lines(&features_path)?;
    if feature_lines.len() != meta.num_nodes {
        return Err(DataError::RowCount {
            file: features_path,
            expected: meta.num_nodes,
            got: feature_lines.len(),
        });
    }
    let mut features = Matrix::zeros(meta.num_nodes, meta.num_features);
    for (i, line) in feature_lines.iter().enumerate() {
        let values: Vec<&str> = line.split(',').collect();
        if values.len() != meta.num_features {
            return Err(DataError::Parse {
                file: features_path.clone(),
                line: i + 1,
                message: format!(
                    "expected {} comma-separated values, found {}",
                    meta.num_features,
                    values.len()
                ),
            });
        }
        for (j, v) in values.iter().enumerate() {
            let parsed = v.parse::<f64>().map_err(|e| DataError::Parse {
                file: features_path.clone(),
                line: i + 1,
                message: format!("bad float {v:?}: {e}"),
            })?;
            features.set(i, j, parsed);
        }
    }

    let labels_path = dir.join("labels.csv");
    let label_lines = read_lines(&labels_path)?;
    if label_lines.len() != meta.num_nodes {
        return Err(DataError::RowCount {
            file: labels_path,
            expected: meta.num_nodes,
            got: label_lines.len(),
        });
    }
    let mut labels = Vec::with_capacity(meta.num_nodes);
    for (i, line) in label_lines.iter().enumerate() {
        let label = line.trim().parse::<usize>().map_err(|e| DataError::Parse {
            file: labels_path.clone(),
            line: i + 1,
            message: format!("bad label {line:?}: {e}"),
        })?;
        if label >= meta.num_classes {
            return Err(DataError::Parse {
                file: labels_path.clone(),
                line: i + 1,
                message: format!(
                    "label {} out of range for {} classes",
                    label, meta.num_classes
                ),
            });
        }
        labels.push(label);
    }

    Ok(build_graph(
        &edges,
        meta.num_nodes,
        features,
        labels,
        meta.num_classes,
        &meta.name,
    )?)
}

/// Writes the canonical files. Byte output is deterministic for a
/// given dataset; refuses to overwrite an existing dataset unless
/// `force`.
pub fn save_dataset(g: &GraphDataset, dir: &Path, force: bool) -> Result<(), DataError> {
    let meta_path = dir.join("meta.json");
    if meta_path.exists() && !force {
        return Err(DataError::AlreadyExists { path: meta_path });
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let meta = Meta {
        name: g.name.clone(),
        num_nodes: g.num_nodes,
        num_features: g.features.cols(),
        num_classes: g.num_classes,
    };
    let meta_text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, meta_text + "\n").map_err(io_err(&meta_path))?;

    let mut edges = String::new();
    for &(u, v) in &g.edges {
        writeln!(edges, "{u}\t{v}").unwrap();
    }
    let edges_path = dir.join("edges.tsv");
    fs::write(&edges_path, edges).map_err(io_err(&edges_path))?;

    let mut features = String::new();
    for i in 0..g.num_nodes {
        let row: Vec<String> = g.features.row(i).iter().map(f64::to_string).collect();
        writeln!(features, "{}", row.join(",")).unwrap();
    }
    let features_path = dir.join("features.csv");
    fs::write(&features_path, features).map_err(io_err(&features_path))?;

    let mut labels = String::new();
    for &l in &g.labels {
        writeln!(labels, "{l}").unwrap();
    }
    let labels_path = dir.join("labels.csv");
    fs::write(&labels_path, labels).map_err(io_err(&labels_path))?;
    Ok(())
}

fn splits_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("splits").join(format!("seed_{seed}.csv"))
}

/// Writes `splits/seed_<s>.csv` under the dataset directory.
pub fn save_splits(masks: &SplitMasks, dir: &Path, num_nodes: usize) -> Result<(), DataError> {
    let mut roles = vec!["test"; num_nodes];
    for &i in &masks.train {
        roles[i] = "train";
    }
    for &i in &masks.val {
        roles[i] = "val";
    }
    let path = splits_path(dir, masks.seed);
    let parent = path.parent().unwrap();
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let mut text = String::new();
    for role in roles {
        writeln!(text, "{role}").unwrap();
    }
    fs::write(&path, text).map_err(io_err(&path))
}

/// Reads `splits/seed_<s>.csv`; errors if the file is missing, holds
/// an unknown role, or disagrees with the node count.
pub fn load_splits(dir: &Path, seed: u64, num_nodes: usize) -> Result<SplitMasks, DataError> {
    let path = splits_path(dir, seed);
    let lines = read_lines(&path)?;
    if lines.len() != num_nodes {
        return Err(DataError::RowCount {
            file: path,
            expected: num_nodes,
            got: lines.len(),
        });
    }
    let mut masks = SplitMasks {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (i, line) in lines.iter().enumerate() {
        match line.trim() {
            "train" => masks.train.push(i),
            "val" => masks.val.push(i),
            "test" => masks.test.push(i),
            other => {
                return Err(DataError::Parse {
                    file: path,
                    line: i + 1,
                    message: format!("unknown split role {other:?}"),
                })
            }
        }
    }
    Ok(masks)
}

/// Stochastic block model settings. Features are a one-hot block mean
/// scaled by `feature_signal` plus standard-normal noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub num_blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_signal: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SbmConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_blocks < 2 {
            return Err(DataError::InvalidConfig("num_blocks must be >= 2".into()));
        }
        if self.nodes_per_block == 0 {
            return Err(DataError::InvalidConfig(
                "nodes_per_block must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_out)
            || !(0.0..=1.0).contains(&self.p_in)
            || self.p_out > self.p_in
        {
            return Err(DataError::InvalidConfig(format!(
                "need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if self.feature_dim < self.num_blocks {
            return Err(DataError::InvalidConfig(format!(
                "feature_dim {} must be >= num_blocks {}",
                self.feature_dim, self.num_blocks
            )));
        }
        Ok(())
    }
}

/// Generates a block-structured graph. The edge PRNG is consumed in a
/// fixed order (one draw per upper-triangle pair, nodes in block-major
/// order), so output is a pure function of the config.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<GraphDataset, DataError> {
    cfg.validate()?;
    let n = cfg.num_blocks * cfg.nodes_per_block;
    let block = |i: usize| i / cfg.nodes_per_block;

    let mut edge_rng = rng::stream(cfg.seed, rng::STREAM_SBM_EDGES);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block(i) == block(j) {
                cfg.p_in
            } else {
                cfg.p_out
            };
            let draw: f64 = edge_rng.gen();
            if draw < p {
                edges.push((i, j));
            }
        }
    }

    let mut feat_rng = rng::stream(cfg.seed, rng::STREAM_SBM_FEATURES);
    let mut features = Matrix::zeros(n, cfg.feature_dim);
    for i in 0..n {
        for d in 0..cfg.feature_dim {
            let mean = if d == block(i) {
                cfg.feature_signal
            } else {
                0.0
            };
            let noise: f64 = feat_rng.sample(StandardNormal);
            features.set(i, d, mean + noise);
        }
    }

    let labels: Vec<usize> = (0..n).map(block).collect();
    let name = format!("sbm_{}x{}", cfg.num_blocks, cfg.nodes_per_block);
    Ok(build_graph(
        &edges,
        n,
        features,
        labels,
        cfg.num_blocks,
        &name,
    )?)
}
