//! GETS: a mixture of calibration experts with noisy top-k gating.
//!
//! Each expert is a two-layer network mapping one input ensemble
//! (combinations of logits z, features x, and a learned degree
//! embedding d) to a node-wise positive temperature, and emits
//! calibrated logits C_m = z / T_m. The gate scores experts from the
//! concatenation of all calibrated logits, keeps the top k per node,
//! and mixes: z' = sum_m w_m * C_m. Every expert output is a positive
//! per-row scaling of z, so the mixture preserves every argmax.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_uniform, Adam, ParamId, ParamSet, Tape, Var};
use crate::graph::NormalizedAdjacency;
use crate::matrix::Matrix;
use crate::metrics::nll_from_logits;
use crate::models::{register_two_layer, two_layer_forward, GcnNetwork};
use crate::rng;

use super::{CalibrationError, CALIBRATOR_MAX_EPOCHS, CALIBRATOR_PATIENCE, TEMPERATURE_FLOOR};

pub const EMBEDDING_DIM: usize = 16;
/// Degree-embedding table size cap; larger degrees clamp to the last
/// bucket.
pub const MAX_DEGREE_BUCKETS: usize = 1024;

/// One expert's input: a combination of logits `z`, raw features `x`,
/// and the degree embedding `d`, column-concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputEnsemble {
    Z,
    X,
    D,
    Zx,
    Xd,
    Zd,
    Zxd,
}

/// The full ensemble list in its fixed order.
pub const ALL_ENSEMBLES: [InputEnsemble; 7] = [
    InputEnsemble::Z,
    InputEnsemble::X,
    InputEnsemble::D,
    InputEnsemble::Zx,
    InputEnsemble::Xd,
    InputEnsemble::Zd,
    InputEnsemble::Zxd,
];

impl InputEnsemble {
    /// (uses z, uses x, uses d)
    fn parts(self) -> (bool, bool, bool) {
        match self {
            InputEnsemble::Z => (true, false, false),
            InputEnsemble::X => (false, true, false),
            InputEnsemble::D => (false, false, true),
            InputEnsemble::Zx => (true, true, false),
            InputEnsemble::Xd => (false, true, true),
            InputEnsemble::Zd => (true, false, true),
            InputEnsemble::Zxd => (true, true, true),
        }
    }

    pub fn width(self, num_classes: usize, num_features: usize) -> usize {
        let (z, x, d) = self.parts();
        (z as usize) * num_classes + (x as usize) * num_features + (d as usize) * EMBEDDING_DIM
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertBackbone {
    Gcn,
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GetsConfig {
    pub ensembles: Vec<InputEnsemble>,
    pub backbone: ExpertBackbone,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub top_k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for GetsConfig {
    fn default() -> Self {
        GetsConfig {
            ensembles: ALL_ENSEMBLES.to_vec(),
            backbone: ExpertBackbone::Gcn,
            hidden_dim: 16,
            dropout: 0.5,
            top_k: 2,
            learning_rate: 0.1,
            weight_decay: 0.0,
            max_epochs: CALIBRATOR_MAX_EPOCHS,
            patience: CALIBRATOR_PATIENCE,
            seed: 0,
        }
    }
}

impl GetsConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.ensembles.is_empty() {
            return Err(CalibrationError::InvalidConfig(
                "at least one input ensemble required".into(),
            ));
        }
        for (i, a) in self.ensembles.iter().enumerate() {
            if self.ensembles[i + 1..].contains(a) {
                return Err(CalibrationError::InvalidConfig(format!(
                    "duplicate input ensemble {a:?}"
                )));
            }
        }
        if self.top_k == 0 || self.top_k > self.ensembles.len() {
            return Err(CalibrationError::InvalidConfig(format!(
                "top_k {} must lie in [1, {}]",
                self.top_k,
                self.ensembles.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CalibrationError::InvalidConfig(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.hidden_dim == 0 {
            return Err(CalibrationError::InvalidConfig(
                "hidden_dim must be >= 1".into(),
            ));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(CalibrationError::InvalidConfig(
                "max_epochs and patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The full mixture: expert networks, degree embedding, gate weights.
#[derive(Debug, Clone)]
pub struct GetsCalibrator {
    pub config: GetsConfig,
    pub params: ParamSet,
    pub experts: Vec<GcnNetwork>,
    pub embedding: ParamId,
    pub w_g: ParamId,
    pub w_n: ParamId,
    pub num_classes: usize,
    pub num_features: usize,
    pub max_degree_bucket: usize,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl GetsCalibrator {
    /// Fresh calibrator with initialized parameters; `fit_gets` wraps
    /// this, and checkpoint loading rebuilds the same structure before
    /// overwriting the values.
    pub fn init(
        config: GetsConfig,
        num_classes: usize,
        num_features: usize,
        max_observed_degree: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, CalibrationError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut experts = Vec::with_capacity(config.ensembles.len());
        for (m, kind) in config.ensembles.iter().enumerate() {
            let in_dim = kind.width(num_classes, num_features);
            let (w1, b1, w2, b2) = register_two_layer(
                &mut params,
                &format!("expert{m}"),
                in_dim,
                config.hidden_dim,
                1,
                rng,
            );
            experts.push(GcnNetwork {
                w1,
                b1,
                w2,
                b2,
                hidden_dim: config.hidden_dim,
                dropout_p: config.dropout,
            });
        }
        let max_degree_bucket = max_observed_degree.min(MAX_DEGREE_BUCKETS - 1);
        let table = standard_normal_matrix(max_degree_bucket + 1, EMBEDDING_DIM, rng);
        let embedding = params.add(
            "degree_embedding",
            max_degree_bucket + 1,
            EMBEDDING_DIM,
            table.data().to_vec(),
        );
        let m = config.ensembles.len();
        let d_gate = m * num_classes;
        let w_g = params.add("w_g", d_gate, m, glorot_uniform(d_gate, m, rng));
        let w_n = params.add("w_n", d_gate, m, glorot_uniform(d_gate, m, rng));
        Ok(GetsCalibrator {
            config,
            params,
            experts,
            embedding,
            w_g,
            w_n,
            num_classes,
            num_features,
            max_degree_bucket,
            best_epoch: 0,
            best_val_nll: f64::INFINITY,
        })
    }
}

fn hcat(parts: &[&Matrix]) -> Matrix {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mut j = 0;
        for p in parts {
            for c in 0..p.cols() {
                out.set(i, j, p.get(i, c));
                j += 1;
            }
        }
    }
    out
}

/// The input matrices for each configured ensemble, in order. `d` is
/// the per-node degree embedding (already looked up).
pub fn build_input_ensembles(
    z: &Matrix,
    x: &Matrix,
    d: &Matrix,
    ensembles: &[InputEnsemble],
) -> Result<Vec<Matrix>, CalibrationError> {
    for (what, m) in [("features", x), ("degree embedding", d)] {
        if m.rows() != z.rows() {
            return Err(CalibrationError::RowCountMismatch {
                what,
                expected: z.rows(),
                got: m.rows(),
            });
        }
    }
    Ok(ensembles
        .iter()
        .map(|kind| match kind {
            InputEnsemble::Z => z.clone(),
            InputEnsemble::X => x.clone(),
            InputEnsemble::D => d.clone(),
            InputEnsemble::Zx => hcat(&[z, x]),
            InputEnsemble::Xd => hcat(&[x, d]),
            InputEnsemble::Zd => hcat(&[z, d]),
            InputEnsemble::Zxd => hcat(&[z, x, d]),
        })
        .collect())
}

/// Gate scores `Q = h W_g + eps .* softplus(h W_n)` with fresh
/// standard-normal `eps` per (node, expert) when `training`, else
/// `eps = 0`.
pub fn gating_scores(
    h: &Matrix,
    w_g: &Matrix,
    w_n: &Matrix,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix, CalibrationError> {
    for (what, w) in [("w_g", w_g), ("w_n", w_n)] {
        if w.rows() != h.cols() || w.cols() != w_g.cols() {
            return Err(CalibrationError::RowCountMismatch {
                what,
                expected: h.cols(),
                got: w.rows(),
            });
        }
    }
    let mut q = h.matmul(w_g);
    if training {
        let noise_scale = h.matmul(w_n);
        let eps = standard_normal_matrix(q.rows(), q.cols(), rng);
        for i in 0..q.rows() {
            for j in 0..q.cols() {
                let sp = softplus_value(noise_scale.get(i, j));
                q.set(i, j, q.get(i, j) + eps.get(i, j) * sp);
            }
        }
    }
    Ok(q)
}

fn softplus_value(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per row: keep the k largest scores (ties to the lower index),
/// softmax among them, zero elsewhere. Each row sums to 1.
pub fn topk_weights(q: &Matrix, k: usize) -> Matrix {
    assert!(
        k >= 1 && k <= q.cols(),
        "top_k {k} out of range for {} experts",
        q.cols()
    );
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for i in 0..q.rows() {
        let row = q.row(i);
        let selected = crate::autodiff::topk_select(row, k);
        let max = selected
            .iter()
            .map(|&j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &j in &selected {
            denom += (row[j] - max).exp();
        }
        for &j in &selected {
            out.set(i, j, (row[j] - max).exp() / denom);
        }
    }
    out
}

/// Per-node temperatures from one expert: two-layer forward to a
/// single output column, softplus, plus the floor.
pub fn expert_temperatures(
    expert: &GcnNetwork,
    params: &ParamSet,
    adj: Option<&NormalizedAdjacency>,
    input: &Matrix,
) -> Result<Vec<f64>, CalibrationError> {
    let mut tape = Tape::new();
    let mut unused = rng::stream(0, rng::STREAM_CALIBRATOR_DROPOUT);
    let x = tape.constant_matrix(input);
    let raw = two_layer_forward(
        &mut tape,
        params,
        (expert.w1, expert.b1, expert.w2, expert.b2),
        adj,
        x,
        expert.dropout_p,
        false,
        &mut unused,
    )?;
    let sp = tape.softplus(raw);
    let t = tape.add_scalar(sp, TEMPERATURE_FLOOR);
    Ok(tape.value(t).to_vec())
}

#[allow(clippy::too_many_arguments)]
fn forward_on_tape(
    cal: &GetsCalibrator,
    params: &ParamSet,
    tape: &mut Tape,
    adj: &NormalizedAdjacency,
    z: &Matrix,
    x: &Matrix,
    degrees: &[usize],
    training: bool,
    dropout_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(Var, Var), CalibrationError> {
    let n = z.rows();
    let z_var = tape.constant_matrix(z);
    let needs = cal
        .config
        .ensembles
        .iter()
        .fold((false, false, false), |acc, e| {
            let p = e.parts();
            (acc.0 || p.0, acc.1 || p.1, acc.2 || p.2)
        });
    let x_var = if needs.1 {
        Some(tape.constant_matrix(x))
    } else {
        None
    };
    let d_var = if needs.2 {
        let idx: Vec<usize> = degrees
            .iter()
            .map(|&d| d.min(cal.max_degree_bucket))
            .collect();
        let table = tape.param(params, cal.embedding);
        Some(tape.embedding_lookup(table, &idx)?)
    } else {
        None
    };

    let adj_opt = match cal.config.backbone {
        ExpertBackbone::Gcn => Some(adj),
        ExpertBackbone::Mlp => None,
    };

    let mut calibrated = Vec::with_capacity(cal.experts.len());
    for (expert, kind) in cal.experts.iter().zip(&cal.config.ensembles) {
        let (uz, ux, ud) = kind.parts();
        let mut parts = Vec::new();
        if uz {
            parts.push(z_var);
        }
        if ux {
            parts.push(x_var.expect("x required"));
        }
        if ud {
            parts.push(d_var.expect("d required"));
        }
        let input = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        };
        let raw = two_layer_forward(
            tape,
            params,
            (expert.w1, expert.b1, expert.w2, expert.b2),
            adj_opt,
            input,
            expert.dropout_p,
            training,
            dropout_rng,
        )?;
        let sp = tape.softplus(raw);
        let t = tape.add_scalar(sp, TEMPERATURE_FLOOR);
        calibrated.push(tape.rowwise_divide(z_var, t)?);
    }

    let h = if calibrated.len() == 1 {
        calibrated[0]
    } else {
        tape.concat_cols(&calibrated)?
    };
    let wg = tape.param(params, cal.w_g);
    let mut q = tape.matmul(h, wg)?;
    if training {
        let wn = tape.param(params, cal.w_n);
        let pre = tape.matmul(h, wn)?;
        let sp = tape.softplus(pre);
        let m = cal.experts.len();
        let eps = standard_normal_matrix(n, m, noise_rng);
        let eps = tape.constant_matrix(&eps);
        let noise = tape.mul(eps, sp)?;
        q = tape.add(q, noise)?;
    }
    let weights = tape.topk_softmax(q, cal.config.top_k)?;

    let mut mixed: Option<Var> = None;
    for (m, &c) in calibrated.iter().enumerate() {
        let w_col = tape.slice_col(weights, m)?;
        let term = tape.rowwise_scale(c, w_col)?;
        mixed = Some(match mixed {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok((mixed.expect("at least one expert"), weights))
}

fn check_forward_shapes(
    cal: &GetsCalibrator,
    z: &Matrix,
    x: &Matrix,
    degrees: &[usize],
) -> Result<(), CalibrationError> {
    if x.rows() != z.rows() {
        return Err(CalibrationError::RowCountMismatch {
            what: "features",
            expected: z.rows(),
            got: x.rows(),
        });
    }
    if degrees.len() != z.rows() {
        return Err(CalibrationError::LengthMismatch {
            what: "degrees",
            expected: z.rows(),
            got: degrees.len(),
        });
    }
    if z.cols() != cal.num_classes || x.cols() != cal.num_features {
        return Err(CalibrationError::InvalidConfig(format!(
            "calibrator built for {}x{} inputs, got z width {} and x width {}",
            cal.num_classes,
            cal.num_features,
            z.cols(),
            x.cols()
        )));
    }
    Ok(())
}

/// Calibrated logits and gate weights. With `training = false` this is
/// a pure function of the fitted parameters (no noise, no dropout);
/// with `training = true` the noise and dropout streams are re-derived
/// from `cal.config.seed`, so repeated calls are identical to each
/// other but not to the draws made inside `fit_gets`.
pub fn gets_forward(
    cal: &GetsCalibrator,
    adj: &NormalizedAdjacency,
    z: &Matrix,
    x: &Matrix,
    degrees: &[usize],
    training: bool,
) -> Result<(Matrix, Matrix), CalibrationError> {
    check_forward_shapes(cal, z, x, degrees)?;
    let mut dropout_rng = rng::stream(cal.config.seed, rng::STREAM_CALIBRATOR_DROPOUT);
    let mut noise_rng = rng::stream(cal.config.seed, rng::STREAM_GATING_NOISE);
    let mut tape = Tape::new();
    let (z_prime, weights) = forward_on_tape(
        cal,
        &cal.params,
        &mut tape,
        adj,
        z,
        x,
        degrees,
        training,
        &mut dropout_rng,
        &mut noise_rng,
    )?;
    Ok((tape.to_matrix(z_prime), tape.to_matrix(weights)))
}

/// Builds the deterministic (noise and dropout off) mixture NLL on a
/// caller-owned tape so callers can differentiate through the whole
/// calibrator, e.g. for finite-difference checks. `params` supplies
/// the parameter values; pass `&cal.params` or a perturbed copy.
#[allow(clippy::too_many_arguments)]
pub fn gets_nll_on_tape(
    cal: &GetsCalibrator,
    params: &ParamSet,
    tape: &mut Tape,
    adj: &NormalizedAdjacency,
    z: &Matrix,
    x: &Matrix,
    degrees: &[usize],
    labels: &[usize],
    mask: &[usize],
) -> Result<Var, CalibrationError> {
    check_forward_shapes(cal, z, x, degrees)?;
    let mut dropout_rng = rng::stream(cal.config.seed, rng::STREAM_CALIBRATOR_DROPOUT);
    let mut noise_rng = rng::stream(cal.config.seed, rng::STREAM_GATING_NOISE);
    let (z_prime, _) = forward_on_tape(
        cal,
        params,
        tape,
        adj,
        z,
        x,
        degrees,
        false,
        &mut dropout_rng,
        &mut noise_rng,
    )?;
    Ok(tape.log_softmax_nll(z_prime, labels, mask)?)
}

/// Trains experts, degree embedding, and gate jointly by Adam on
/// validation NLL of the mixed logits. Noise on during training
/// passes, off for the per-epoch evaluation; early stopping on
/// validation NLL; best-epoch parameters returned.
pub fn fit_gets(
    adj: &NormalizedAdjacency,
    z: &Matrix,
    x: &Matrix,
    degrees: &[usize],
    labels: &[usize],
    val_mask: &[usize],
    cfg: &GetsConfig,
) -> Result<GetsCalibrator, CalibrationError> {
    if val_mask.is_empty() {
        return Err(CalibrationError::EmptyMask);
    }
    if labels.len() != z.rows() {
        return Err(CalibrationError::LengthMismatch {
            what: "labels",
            expected: z.rows(),
            got: labels.len(),
        });
    }
    let max_degree = degrees.iter().copied().max().unwrap_or(0);
    let mut init_rng = rng::stream(cfg.seed, rng::STREAM_CALIBRATOR_INIT);
    let mut cal = GetsCalibrator::init(cfg.clone(), z.cols(), x.cols(), max_degree, &mut init_rng)?;
    check_forward_shapes(&cal, z, x, degrees)?;

    let mut dropout_rng = rng::stream(cfg.seed, rng::STREAM_CALIBRATOR_DROPOUT);
    let mut noise_rng = rng::stream(cfg.seed, rng::STREAM_GATING_NOISE);
    let mut opt = Adam::new(&cal.params, cfg.learning_rate, cfg.weight_decay);

    let mut best_val_nll = f64::INFINITY;
    let mut best_snapshot = cal.params.snapshot();
    let mut best_epoch = 0;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut tape = Tape::new();
        let (z_prime, _) = forward_on_tape(
            &cal,
            &cal.params,
            &mut tape,
            adj,
            z,
            x,
            degrees,
            true,
            &mut dropout_rng,
            &mut noise_rng,
        )?;
        let loss = tape.log_softmax_nll(z_prime, labels, val_mask)?;
        if !tape.scalar(loss).is_finite() {
            return Err(CalibrationError::Diverged { epoch });
        }
        cal.params.zero_grads();
        tape.backward(loss, &mut cal.params)?;
        opt.step(&mut cal.params);

        let mut eval = Tape::new();
        let (z_eval, _) = forward_on_tape(
            &cal,
            &cal.params,
            &mut eval,
            adj,
            z,
            x,
            degrees,
            false,
            &mut dropout_rng,
            &mut noise_rng,
        )?;
        let val_nll = nll_from_logits(&eval.to_matrix(z_eval), labels, val_mask);
        if !val_nll.is_finite() {
            return Err(CalibrationError::Diverged { epoch });
        }
        if val_nll < best_val_nll {
            best_val_nll = val_nll;
            best_snapshot = cal.params.snapshot();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    cal.params.restore(&best_snapshot);
    cal.best_epoch = best_epoch;
    cal.best_val_nll = best_val_nll;
    Ok(cal)
}
