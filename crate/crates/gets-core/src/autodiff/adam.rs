//! Adam with decoupled weight decay.

use super::params::ParamSet;

/// Optimizer state: one moment pair per parameter slot.
///
/// The update applies decoupled decay `p *= 1 - lr * wd` first, then
/// the bias-corrected Adam step `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Allocates moment slots for every parameter currently in `params`.
    pub fn new(params: &ParamSet, learning_rate: f64, weight_decay: f64) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Adam {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        for slot in 0..params.len() {
            let p = params.get_mut(super::params::ParamId(slot));
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.value.len() {
                p.value[i] *= decay;
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
