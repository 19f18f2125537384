//! Post-hoc calibrators for frozen classifier logits.
//!
//! Five methods share this module: scalar temperature scaling, vector
//! scaling, ensemble temperature scaling, a node-wise temperature GCN
//! (CaGCN style), and the GETS mixture of calibration experts. All of
//! them fit on the validation mask only; test nodes stay untouched
//! until evaluation.

mod cagcn;
mod gets;
mod scaling;

pub use cagcn::{cagcn_calibrate, cagcn_temperatures, fit_cagcn, CaGcnCalibrator, CaGcnConfig};
pub use gets::{
    build_input_ensembles, expert_temperatures, fit_gets, gating_scores, gets_forward,
    gets_nll_on_tape, topk_weights, ExpertBackbone, GetsCalibrator, GetsConfig, InputEnsemble,
    ALL_ENSEMBLES, EMBEDDING_DIM, MAX_DEGREE_BUCKETS,
};
pub use scaling::{
    ets_mix, fit_ets_weights, fit_temperature_scaling, fit_vector_scaling, vector_scale,
    EtsWeights, TemperatureScaler, VectorScaler, DEFAULT_T_MAX, DEFAULT_T_MIN,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::matrix::Matrix;

pub const CALIBRATOR_MAX_EPOCHS: usize = 1000;
pub const CALIBRATOR_PATIENCE: usize = 50;
/// Added after softplus so node-wise temperatures stay bounded away
/// from zero.
pub const TEMPERATURE_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("temperature {value} at index {index} is not positive")]
    NonPositiveTemperature { index: usize, value: f64 },
    #[error("got {got} temperatures for {expected} rows")]
    TemperatureCountMismatch { expected: usize, got: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("row counts differ: {what} has {got} rows, expected {expected}")]
    RowCountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("validation mask is empty")]
    EmptyMask,
    #[error("invalid calibrator config: {0}")]
    InvalidConfig(String),
    #[error("calibrator training diverged with non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("mixture weights {weights:?} are not on the simplex")]
    InvalidWeights { weights: [f64; 3] },
}

/// Scalar or per-node temperature set.
#[derive(Debug, Clone, PartialEq)]
pub enum Temperatures {
    Scalar(f64),
    PerNode(Vec<f64>),
}

/// `z_i / T_i`. Positive scaling per row, so every row's argmax is
/// preserved.
pub fn scale_logits_by_temperature(
    z: &Matrix,
    t: &Temperatures,
) -> Result<Matrix, CalibrationError> {
    match t {
        Temperatures::Scalar(t) => {
            if *t <= 0.0 || t.is_nan() {
                return Err(CalibrationError::NonPositiveTemperature {
                    index: 0,
                    value: *t,
                });
            }
            let data = z.data().iter().map(|&v| v / t).collect();
            Ok(Matrix::from_vec(z.rows(), z.cols(), data))
        }
        Temperatures::PerNode(ts) => {
            if ts.len() != z.rows() {
                return Err(CalibrationError::TemperatureCountMismatch {
                    expected: z.rows(),
                    got: ts.len(),
                });
            }
            if let Some((i, &bad)) = ts.iter().enumerate().find(|(_, &t)| t <= 0.0 || t.is_nan()) {
                return Err(CalibrationError::NonPositiveTemperature {
                    index: i,
                    value: bad,
                });
            }
            let mut out = Matrix::zeros(z.rows(), z.cols());
            for (i, &ti) in ts.iter().enumerate() {
                for j in 0..z.cols() {
                    out.set(i, j, z.get(i, j) / ti);
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::argmax;

    #[test]
    fn unit_temperature_is_identity() {
        let z = Matrix::from_rows(&[vec![3.0, -1.5, 0.25], vec![0.1, 0.2, 0.3]]);
        let out = scale_logits_by_temperature(&z, &Temperatures::Scalar(1.0)).unwrap();
        assert_eq!(out.data(), z.data());
    }

    #[test]
    fn scalar_temperature_divides_and_keeps_argmax() {
        let z = Matrix::from_rows(&[vec![2.0, 1.0, 0.0]]);
        let out = scale_logits_by_temperature(&z, &Temperatures::Scalar(5.0)).unwrap();
        assert_eq!(out.row(0), &[0.4, 0.2, 0.0]);
        assert_eq!(argmax(out.row(0)), argmax(z.row(0)));
    }

    #[test]
    fn per_node_temperatures_divide_rows() {
        let z = Matrix::from_rows(&[vec![2.0, 0.0], vec![2.0, 0.0]]);
        let out = scale_logits_by_temperature(&z, &Temperatures::PerNode(vec![2.0, 4.0])).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.0]);
        assert_eq!(out.row(1), &[0.5, 0.0]);
    }

    #[test]
    fn nonpositive_temperatures_rejected() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]);
        assert!(scale_logits_by_temperature(&z, &Temperatures::Scalar(0.0)).is_err());
        assert!(scale_logits_by_temperature(&z, &Temperatures::Scalar(-2.0)).is_err());
        assert!(scale_logits_by_temperature(&z, &Temperatures::Scalar(f64::NAN)).is_err());
        let err = scale_logits_by_temperature(&z, &Temperatures::PerNode(vec![0.0])).unwrap_err();
        assert!(matches!(
            err,
            CalibrationError::NonPositiveTemperature { index: 0, .. }
        ));
    }

    #[test]
    fn per_node_count_must_match_rows() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let err = scale_logits_by_temperature(&z, &Temperatures::PerNode(vec![1.0])).unwrap_err();
        assert!(matches!(
            err,
            CalibrationError::TemperatureCountMismatch {
                expected: 2,
                got: 1
            }
        ));
    }
}
