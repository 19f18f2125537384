//! Trainable parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named trainable matrix and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Owns every parameter of one model. Registration order is the
/// optimizer-slot order, so construction must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) -> ParamId {
        assert_eq!(value.len(), rows * cols, "parameter {name} has wrong size");
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            rows,
            cols,
            value,
            grad: vec![0.0; rows * cols],
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copies of every value buffer, in slot order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot size mismatch");
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.value.copy_from_slice(s);
        }
    }

    /// Overwrites values by parameter name; errors on unknown names or
    /// shape mismatches. Used when loading checkpoints.
    pub fn load_by_name(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        values: &[f64],
    ) -> Result<(), String> {
        for p in &mut self.params {
            if p.name == name {
                if p.rows != rows || p.cols != cols {
                    return Err(format!(
                        "parameter {name} is {}x{}, checkpoint has {rows}x{cols}",
                        p.rows, p.cols
                    ));
                }
                p.value.copy_from_slice(values);
                return Ok(());
            }
        }
        Err(format!("unknown parameter {name}"))
    }
}

/// Uniform init over `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..=a))
        .collect()
}
