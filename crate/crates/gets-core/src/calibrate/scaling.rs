//! Global scaling calibrators: temperature scaling, vector scaling,
//! ensemble temperature scaling.
//!
//! Temperature scaling minimizes validation NLL over tau = ln T.
//! NLL is convex in 1/T and 1/T is monotone in tau, so the objective
//! is unimodal in tau and a golden-section search over
//! [ln T_min, ln T_max] finds the optimum to machine precision,
//! including the boundary cases (all-correct or all-wrong validation
//! sets push T to a bound). Results within 1e-9 of a bound snap to it
//! exactly.

use crate::autodiff::{ParamSet, Tape};
use crate::matrix::{log_sum_exp, Matrix};

use super::CalibrationError;

pub const DEFAULT_T_MIN: f64 = 0.05;
pub const DEFAULT_T_MAX: f64 = 100.0;

const FIT_ITERS: usize = 1000;
const FIT_LR: f64 = 0.01;

/// Scalar temperature, `z' = z / T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureScaler {
    pub temperature: f64,
}

/// Class-wise affine map, `z' = z * t + b` elementwise per row.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorScaler {
    pub t: Vec<f64>,
    pub b: Vec<f64>,
}

/// Convex mixture of softmax(z/T), softmax(z), and the uniform
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct EtsWeights {
    pub temperature: f64,
    pub weights: [f64; 3],
}

fn mean_nll_at_temperature(logits: &Matrix, labels: &[usize], t: f64) -> f64 {
    let inv = 1.0 / t;
    let mut nll = 0.0;
    let mut scaled = vec![0.0; logits.cols()];
    for i in 0..logits.rows() {
        let row = logits.row(i);
        for (dst, &src) in scaled.iter_mut().zip(row) {
            *dst = src * inv;
        }
        nll += log_sum_exp(&scaled) - scaled[labels[i]];
    }
    nll / logits.rows() as f64
}

/// Fits T on a validation set by minimizing mean NLL over
/// tau = ln T in [ln T_min, ln T_max].
pub fn fit_temperature_scaling(
    logits_val: &Matrix,
    labels_val: &[usize],
) -> Result<TemperatureScaler, CalibrationError> {
    if logits_val.rows() == 0 {
        return Err(CalibrationError::EmptyMask);
    }
    if labels_val.len() != logits_val.rows() {
        return Err(CalibrationError::LengthMismatch {
            what: "labels",
            expected: logits_val.rows(),
            got: labels_val.len(),
        });
    }

    let f = |tau: f64| mean_nll_at_temperature(logits_val, labels_val, tau.exp());
    let mut lo = DEFAULT_T_MIN.ln();
    let mut hi = DEFAULT_T_MAX.ln();
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > 1e-10 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let tau = 0.5 * (lo + hi);
    let temperature = if tau - DEFAULT_T_MIN.ln() < 1e-9 {
        DEFAULT_T_MIN
    } else if DEFAULT_T_MAX.ln() - tau < 1e-9 {
        DEFAULT_T_MAX
    } else {
        tau.exp()
    };
    Ok(TemperatureScaler { temperature })
}

/// `z * t + b` per row.
pub fn vector_scale(z: &Matrix, vs: &VectorScaler) -> Result<Matrix, CalibrationError> {
    for (name, v) in [("t", &vs.t), ("b", &vs.b)] {
        if v.len() != z.cols() {
            return Err(CalibrationError::LengthMismatch {
                what: if name == "t" { "t" } else { "b" },
                expected: z.cols(),
                got: v.len(),
            });
        }
    }
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            out.set(i, j, z.get(i, j) * vs.t[j] + vs.b[j]);
        }
    }
    Ok(out)
}

/// One plain gradient-descent update of every parameter.
fn gd_step(params: &mut ParamSet, lr: f64) {
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = params.get_mut(id);
        for (v, g) in p.value.iter_mut().zip(&p.grad) {
            *v -= lr * g;
        }
    }
}

/// Fits class-wise scale and bias by gradient descent on validation
/// NLL, starting from the temperature-scaling optimum (t = 1/T, b = 0)
/// and keeping the best iterate seen. Vector scaling subsumes scalar
/// scaling, so the fitted NLL never exceeds the TS fit's NLL.
pub fn fit_vector_scaling(
    logits_val: &Matrix,
    labels_val: &[usize],
) -> Result<VectorScaler, CalibrationError> {
    let ts = fit_temperature_scaling(logits_val, labels_val)?;
    let k = logits_val.cols();
    let mask: Vec<usize> = (0..logits_val.rows()).collect();

    let mut params = ParamSet::new();
    let t_id = params.add("vs.t", 1, k, vec![1.0 / ts.temperature; k]);
    let b_id = params.add("vs.b", 1, k, vec![0.0; k]);

    let mut best = params.snapshot();
    let mut best_nll = f64::INFINITY;
    for iter in 0..=FIT_ITERS {
        let mut tape = Tape::new();
        let z = tape.constant_matrix(logits_val);
        let t = tape.param(&params, t_id);
        let b = tape.param(&params, b_id);
        let scaled = tape.row_affine(z, t, b)?;
        let loss = tape.log_softmax_nll(scaled, labels_val, &mask)?;
        let nll = tape.scalar(loss);
        if nll < best_nll {
            best_nll = nll;
            best = params.snapshot();
        }
        if iter == FIT_ITERS {
            break;
        }
        params.zero_grads();
        tape.backward(loss, &mut params)?;
        gd_step(&mut params, FIT_LR);
    }
    params.restore(&best);
    Ok(VectorScaler {
        t: params.get(t_id).value.clone(),
        b: params.get(b_id).value.clone(),
    })
}

/// `w1 * softmax(z/T) + w2 * softmax(z) + w3 / K` per row.
pub fn ets_mix(z: &Matrix, ets: &EtsWeights) -> Result<Matrix, CalibrationError> {
    if ets.temperature <= 0.0 || ets.temperature.is_nan() {
        return Err(CalibrationError::NonPositiveTemperature {
            index: 0,
            value: ets.temperature,
        });
    }
    let w = ets.weights;
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(CalibrationError::InvalidWeights { weights: w });
    }
    let k = z.cols() as f64;
    let scaled =
        super::scale_logits_by_temperature(z, &super::Temperatures::Scalar(ets.temperature))?;
    let p_t = scaled.softmax_rows();
    let p_raw = z.softmax_rows();
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            out.set(
                i,
                j,
                w[0] * p_t.get(i, j) + w[1] * p_raw.get(i, j) + w[2] / k,
            );
        }
    }
    Ok(out)
}

/// Fits the three mixture weights as softmax of free reals, gradient
/// descent on validation NLL of the mixture, best iterate kept.
pub fn fit_ets_weights(
    logits_val: &Matrix,
    labels_val: &[usize],
    t_fitted: f64,
) -> Result<EtsWeights, CalibrationError> {
    if logits_val.rows() == 0 {
        return Err(CalibrationError::EmptyMask);
    }
    if t_fitted <= 0.0 || t_fitted.is_nan() {
        return Err(CalibrationError::NonPositiveTemperature {
            index: 0,
            value: t_fitted,
        });
    }
    let (n, k) = (logits_val.rows(), logits_val.cols());
    let mask: Vec<usize> = (0..n).collect();

    let mut params = ParamSet::new();
    let a_id = params.add("ets.logits", 1, 3, vec![0.0; 3]);

    let mut best = params.snapshot();
    let mut best_nll = f64::INFINITY;
    for iter in 0..=FIT_ITERS {
        let mut tape = Tape::new();
        let z = tape.constant_matrix(logits_val);
        let z_t = tape.scale(z, 1.0 / t_fitted);
        let p_t = tape.softmax_rows(z_t);
        let p_raw = tape.softmax_rows(z);
        let uniform = tape.constant(n, k, vec![1.0 / k as f64; n * k]);
        let a = tape.param(&params, a_id);
        let w = tape.softmax_rows(a);
        let mix = tape.convex_mix(w, &[p_t, p_raw, uniform])?;
        let loss = tape.nll_probs(mix, labels_val, &mask)?;
        let nll = tape.scalar(loss);
        if nll < best_nll {
            best_nll = nll;
            best = params.snapshot();
        }
        if iter == FIT_ITERS {
            break;
        }
        params.zero_grads();
        tape.backward(loss, &mut params)?;
        gd_step(&mut params, FIT_LR);
    }
    params.restore(&best);
    let a = &params.get(a_id).value;
    let mut w = [0.0; 3];
    crate::matrix::softmax_into(a, &mut w);
    Ok(EtsWeights {
        temperature: t_fitted,
        weights: w,
    })
}
