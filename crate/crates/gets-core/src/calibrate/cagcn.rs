//! Node-wise temperature calibration with a GCN over the frozen
//! logits (CaGCN style): T_i = softplus(f(z, A)_i) + floor, then
//! z'_i = z_i / T_i.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, ParamSet, Tape};
use crate::graph::NormalizedAdjacency;
use crate::matrix::Matrix;
use crate::metrics::nll_from_logits;
use crate::models::GcnNetwork;
use crate::rng;

use super::{
    scale_logits_by_temperature, CalibrationError, Temperatures, CALIBRATOR_MAX_EPOCHS,
    CALIBRATOR_PATIENCE, TEMPERATURE_FLOOR,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaGcnConfig {
    pub hidden_dim: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for CaGcnConfig {
    fn default() -> Self {
        CaGcnConfig {
            hidden_dim: 16,
            dropout: 0.5,
            learning_rate: 0.01,
            weight_decay: 0.0,
            max_epochs: CALIBRATOR_MAX_EPOCHS,
            patience: CALIBRATOR_PATIENCE,
            seed: 0,
        }
    }
}

impl CaGcnConfig {
    fn validate(&self) -> Result<(), CalibrationError> {
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
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CalibrationError::InvalidConfig(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Fitted K -> H -> 1 temperature network.
#[derive(Debug, Clone)]
pub struct CaGcnCalibrator {
    pub network: GcnNetwork,
    pub params: ParamSet,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

fn temperatures_on_tape(
    tape: &mut Tape,
    network: &GcnNetwork,
    params: &ParamSet,
    adj: &NormalizedAdjacency,
    logits: &Matrix,
    training: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<crate::autodiff::Var, CalibrationError> {
    let x = tape.constant_matrix(logits);
    let raw = network.forward(tape, params, adj, x, training, rng)?;
    let sp = tape.softplus(raw);
    Ok(tape.add_scalar(sp, TEMPERATURE_FLOOR))
}

/// Trains the temperature GCN by Adam on validation NLL of the scaled
/// logits, early stopping on the same quantity, best epoch returned.
pub fn fit_cagcn(
    adj: &NormalizedAdjacency,
    logits_full: &Matrix,
    labels: &[usize],
    val_mask: &[usize],
    cfg: &CaGcnConfig,
) -> Result<CaGcnCalibrator, CalibrationError> {
    cfg.validate()?;
    if val_mask.is_empty() {
        return Err(CalibrationError::EmptyMask);
    }
    if labels.len() != logits_full.rows() {
        return Err(CalibrationError::LengthMismatch {
            what: "labels",
            expected: logits_full.rows(),
            got: labels.len(),
        });
    }

    let mut init_rng = rng::stream(cfg.seed, rng::STREAM_CALIBRATOR_INIT);
    let mut dropout_rng = rng::stream(cfg.seed, rng::STREAM_CALIBRATOR_DROPOUT);
    let mut params = ParamSet::new();
    let network = GcnNetwork::new(
        &mut params,
        logits_full.cols(),
        cfg.hidden_dim,
        1,
        cfg.dropout,
        &mut init_rng,
    );
    let mut opt = Adam::new(&params, cfg.learning_rate, cfg.weight_decay);

    let mut best_val_nll = f64::INFINITY;
    let mut best_snapshot = params.snapshot();
    let mut best_epoch = 0;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut tape = Tape::new();
        let t = temperatures_on_tape(
            &mut tape,
            &network,
            &params,
            adj,
            logits_full,
            true,
            &mut dropout_rng,
        )?;
        let z = tape.constant_matrix(logits_full);
        let scaled = tape.rowwise_divide(z, t)?;
        let loss = tape.log_softmax_nll(scaled, labels, val_mask)?;
        if !tape.scalar(loss).is_finite() {
            return Err(CalibrationError::Diverged { epoch });
        }
        params.zero_grads();
        tape.backward(loss, &mut params)?;
        opt.step(&mut params);

        let mut eval = Tape::new();
        let t = temperatures_on_tape(
            &mut eval,
            &network,
            &params,
            adj,
            logits_full,
            false,
            &mut dropout_rng,
        )?;
        let z = eval.constant_matrix(logits_full);
        let scaled = eval.rowwise_divide(z, t)?;
        let val_nll = nll_from_logits(&eval.to_matrix(scaled), labels, val_mask);
        if !val_nll.is_finite() {
            return Err(CalibrationError::Diverged { epoch });
        }
        if val_nll < best_val_nll {
            best_val_nll = val_nll;
            best_snapshot = params.snapshot();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    params.restore(&best_snapshot);
    Ok(CaGcnCalibrator {
        network,
        params,
        best_epoch,
        best_val_nll,
    })
}

/// Node-wise temperatures for `logits`, strictly positive.
pub fn cagcn_temperatures(
    cal: &CaGcnCalibrator,
    adj: &NormalizedAdjacency,
    logits: &Matrix,
) -> Result<Vec<f64>, CalibrationError> {
    let mut tape = Tape::new();
    let mut unused = rng::stream(0, rng::STREAM_CALIBRATOR_DROPOUT);
    let t = temperatures_on_tape(
        &mut tape,
        &cal.network,
        &cal.params,
        adj,
        logits,
        false,
        &mut unused,
    )?;
    Ok(tape.value(t).to_vec())
}

/// Calibrated logits `z_i / T_i`.
pub fn cagcn_calibrate(
    cal: &CaGcnCalibrator,
    adj: &NormalizedAdjacency,
    logits: &Matrix,
) -> Result<Matrix, CalibrationError> {
    let t = cagcn_temperatures(cal, adj, logits)?;
    scale_logits_by_temperature(logits, &Temperatures::PerNode(t))
}
