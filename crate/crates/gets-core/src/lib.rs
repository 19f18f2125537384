//! Confidence calibration for graph neural networks.
//!
//! The crate trains a GCN node classifier, then post-hoc calibrates its
//! logits with temperature scaling, vector scaling, ensemble temperature
//! scaling, CaGCN, or GETS (a sparsely gated mixture of temperature-scaling
//! experts over structural input ensembles). Calibration quality is measured
//! with equal-mass-binned ECE, degree-binned ECE, and VarECE.
//!
//! Module map:
//! - [`graph`]: datasets, CSR sparse matrices, symmetric adjacency normalization
//! - [`autodiff`]: reverse-mode tape over f64 matrices, Adam, gradient checking
//! - [`models`]: two-layer GCN/MLP classifiers and their training loop
//! - [`calibrate`]: the five calibrators plus shared scaling helpers
//! - [`metrics`]: ECE family, reliability reports, accuracy, NLL
//! - [`data`]: on-disk dataset format, split generation, SBM generator
//! - [`experiment`]: end-to-end pipeline, seed sweeps, checkpoints, reports

pub mod autodiff;
pub mod calibrate;
pub mod data;
pub mod experiment;
pub mod graph;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod rng;

pub use autodiff::{
    finite_diff_check, Adam, GradCheckReport, ParamId, ParamSet, Parameter, Tape, Var,
};
pub use calibrate::{
    cagcn_calibrate, cagcn_temperatures, ets_mix, fit_cagcn, fit_ets_weights, fit_gets,
    fit_temperature_scaling, fit_vector_scaling, gets_forward, gets_nll_on_tape,
    scale_logits_by_temperature, topk_weights, vector_scale, CaGcnCalibrator, CaGcnConfig,
    CalibrationError, EtsWeights, ExpertBackbone, GetsCalibrator, GetsConfig, InputEnsemble,
    TemperatureScaler, Temperatures, VectorScaler, ALL_ENSEMBLES, TEMPERATURE_FLOOR,
};
pub use data::{
    generate_sbm, generate_splits, load_dataset, load_splits, save_dataset, save_splits, DataError,
    SbmConfig, SplitMasks,
};
pub use experiment::{
    calibrate_and_evaluate, load_checkpoint, prepare_run, report, run_pipeline, save_checkpoint,
    sweep_seeds, CalibrationInputs, CalibratorKind, DatasetSource, ExperimentConfig,
    ExperimentError, ResultRow, SavedCheckpoint, SavedParam,
};
pub use graph::{
    average_degree, build_graph, node_degrees, normalize_adjacency, CsrMatrix, GraphDataset,
    GraphError, NormalizedAdjacency,
};
pub use matrix::Matrix;
pub use metrics::{
    accuracy_and_nll, degree_binned_ece, ece, equal_mass_bins, evaluate_calibration,
    nll_from_logits, reliability_report, var_ece, BinStats, CalibrationReport, MetricsError,
    DEFAULT_BINS,
};
pub use models::{
    evaluate_classifier, train_classifier, GcnNetwork, MlpNetwork, ModelError, TrainConfig,
    TrainedClassifier,
};
