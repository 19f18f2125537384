//! Two-layer GCN and MLP node classifiers.
//!
//! `logits = A_hat * (dropout(relu(A_hat * dropout(X) * W1 + b1))) * W2 + b2`
//! with dropout before each linear transform; the MLP drops the two
//! `A_hat` products and is otherwise identical.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{glorot_uniform, Adam, AutodiffError, ParamId, ParamSet, Tape, Var};
use crate::data::SplitMasks;
use crate::graph::{GraphDataset, NormalizedAdjacency};
use crate::matrix::Matrix;
use crate::metrics::nll_from_logits;
use crate::rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("training diverged with non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} mask is empty")]
    EmptyMask(&'static str),
}

/// Classifier training settings. Defaults follow the usual two-layer
/// GCN recipe for citation graphs: hidden 16, dropout 0.5, 200 epochs,
/// lr 1e-2, weight decay 5e-4.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub hidden_dim: usize,
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            hidden_dim: 16,
            patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be >= 1".into()));
        }
        if let Some(p) = self.patience {
            if p == 0 || p > self.epochs {
                return Err(ModelError::InvalidConfig(format!(
                    "patience {p} must lie in [1, epochs]"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.hidden_dim == 0 {
            return Err(ModelError::InvalidConfig("hidden_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Two-layer graph convolutional classifier.
#[derive(Debug, Clone)]
pub struct GcnNetwork {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub hidden_dim: usize,
    pub dropout_p: f64,
}

/// Structure-unaware twin of [`GcnNetwork`].
#[derive(Debug, Clone)]
pub struct MlpNetwork {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub hidden_dim: usize,
    pub dropout_p: f64,
}

pub(crate) fn register_two_layer(
    params: &mut ParamSet,
    prefix: &str,
    in_dim: usize,
    hidden_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId, ParamId, ParamId) {
    let w1 = params.add(
        &format!("{prefix}.w1"),
        in_dim,
        hidden_dim,
        glorot_uniform(in_dim, hidden_dim, rng),
    );
    let b1 = params.add(
        &format!("{prefix}.b1"),
        1,
        hidden_dim,
        vec![0.0; hidden_dim],
    );
    let w2 = params.add(
        &format!("{prefix}.w2"),
        hidden_dim,
        out_dim,
        glorot_uniform(hidden_dim, out_dim, rng),
    );
    let b2 = params.add(&format!("{prefix}.b2"), 1, out_dim, vec![0.0; out_dim]);
    (w1, b1, w2, b2)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn two_layer_forward(
    tape: &mut Tape,
    params: &ParamSet,
    ids: (ParamId, ParamId, ParamId, ParamId),
    adj: Option<&NormalizedAdjacency>,
    x: Var,
    dropout_p: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var, AutodiffError> {
    let (w1, b1, w2, b2) = ids;
    let w1 = tape.param(params, w1);
    let b1 = tape.param(params, b1);
    let w2 = tape.param(params, w2);
    let b2 = tape.param(params, b2);

    let h = tape.dropout(x, dropout_p, training, rng)?;
    let h = tape.matmul(h, w1)?;
    let h = match adj {
        Some(a) => tape.spmm(&a.matrix, h)?,
        None => h,
    };
    let h = tape.add_row_bias(h, b1)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, dropout_p, training, rng)?;
    let h = tape.matmul(h, w2)?;
    let h = match adj {
        Some(a) => tape.spmm(&a.matrix, h)?,
        None => h,
    };
    tape.add_row_bias(h, b2)
}

impl GcnNetwork {
    pub fn new(
        params: &mut ParamSet,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (w1, b1, w2, b2) = register_two_layer(params, "gcn", in_dim, hidden_dim, out_dim, rng);
        GcnNetwork {
            w1,
            b1,
            w2,
            b2,
            hidden_dim,
            dropout_p,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        adj: &NormalizedAdjacency,
        x: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, AutodiffError> {
        two_layer_forward(
            tape,
            params,
            (self.w1, self.b1, self.w2, self.b2),
            Some(adj),
            x,
            self.dropout_p,
            training,
            rng,
        )
    }
}

impl MlpNetwork {
    pub fn new(
        params: &mut ParamSet,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (w1, b1, w2, b2) = register_two_layer(params, "mlp", in_dim, hidden_dim, out_dim, rng);
        MlpNetwork {
            w1,
            b1,
            w2,
            b2,
            hidden_dim,
            dropout_p,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, AutodiffError> {
        two_layer_forward(
            tape,
            params,
            (self.w1, self.b1, self.w2, self.b2),
            None,
            x,
            self.dropout_p,
            training,
            rng,
        )
    }
}

/// A trained classifier: best-validation-epoch parameters plus the
/// frozen full-graph logits they produce with training disabled.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub network: GcnNetwork,
    pub params: ParamSet,
    pub logits: Matrix,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

/// Trains a GCN on the train mask, minimizing NLL with Adam. Tracks
/// validation NLL every epoch and returns the parameters of the best
/// validation epoch; with `cfg.patience` set, stops after that many
/// epochs without improvement.
pub fn train_classifier(
    g: &GraphDataset,
    adj: &NormalizedAdjacency,
    splits: &SplitMasks,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier, ModelError> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(ModelError::EmptyMask("train"));
    }
    if splits.val.is_empty() {
        return Err(ModelError::EmptyMask("val"));
    }

    let mut init_rng = rng::stream(cfg.seed, rng::STREAM_CLASSIFIER_INIT);
    let mut dropout_rng = rng::stream(cfg.seed, rng::STREAM_CLASSIFIER_DROPOUT);
    let mut params = ParamSet::new();
    let net = GcnNetwork::new(
        &mut params,
        g.features.cols(),
        cfg.hidden_dim,
        g.num_classes,
        cfg.dropout,
        &mut init_rng,
    );
    let mut opt = Adam::new(&params, cfg.learning_rate, cfg.weight_decay);

    let mut best_val_nll = f64::INFINITY;
    let mut best_snapshot = params.snapshot();
    let mut best_epoch = 0;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let x = tape.constant_matrix(&g.features);
        let logits = net.forward(&mut tape, &params, adj, x, true, &mut dropout_rng)?;
        let loss = tape.log_softmax_nll(logits, &g.labels, &splits.train)?;
        if !tape.scalar(loss).is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
        params.zero_grads();
        tape.backward(loss, &mut params)?;
        opt.step(&mut params);

        let mut eval = Tape::new();
        let x = eval.constant_matrix(&g.features);
        let logits = net.forward(&mut eval, &params, adj, x, false, &mut dropout_rng)?;
        let val_nll = nll_from_logits(&eval.to_matrix(logits), &g.labels, &splits.val);
        if !val_nll.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
        if val_nll < best_val_nll {
            best_val_nll = val_nll;
            best_snapshot = params.snapshot();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if let Some(patience) = cfg.patience {
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    params.restore(&best_snapshot);
    let mut tape = Tape::new();
    let x = tape.constant_matrix(&g.features);
    let logits = net.forward(&mut tape, &params, adj, x, false, &mut dropout_rng)?;
    let logits = tape.to_matrix(logits);
    Ok(TrainedClassifier {
        network: net,
        params,
        logits,
        best_epoch,
        best_val_nll,
    })
}

/// Fraction of masked nodes whose logit argmax (lowest-index ties)
/// matches the label.
pub fn evaluate_classifier(logits: &Matrix, labels: &[usize], mask: &[usize]) -> f64 {
    assert!(!mask.is_empty(), "evaluate_classifier: mask is empty");
    let correct = mask
        .iter()
        .filter(|&&i| logits.argmax_row(i) == labels[i])
        .count();
    correct as f64 / mask.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, normalize_adjacency};

    fn dummy_rng() -> ChaCha8Rng {
        rng::stream(0, rng::STREAM_CLASSIFIER_INIT)
    }

    fn zero_params(params: &mut ParamSet) {
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            params.get_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn set_identity(params: &mut ParamSet, id: ParamId, dim: usize) {
        let p = params.get_mut(id);
        p.value.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..dim {
            p.value[i * dim + i] = 1.0;
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let g = build_graph(
            &[(0, 1)],
            2,
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            vec![0, 1],
            2,
            "t",
        )
        .unwrap();
        let adj = normalize_adjacency(&g);
        let mut params = ParamSet::new();
        let net = GcnNetwork::new(&mut params, 2, 3, 2, 0.0, &mut dummy_rng());
        zero_params(&mut params);
        let mut tape = Tape::new();
        let x = tape.constant_matrix(&g.features);
        let out = net
            .forward(&mut tape, &params, &adj, x, false, &mut dummy_rng())
            .unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isolated_node_identity_weights_pass_relu_through() {
        let g = build_graph(
            &[],
            1,
            Matrix::from_rows(&[vec![-1.0, 2.0]]),
            vec![0],
            2,
            "t",
        )
        .unwrap();
        let adj = normalize_adjacency(&g);
        let mut params = ParamSet::new();
        let net = GcnNetwork::new(&mut params, 2, 2, 2, 0.0, &mut dummy_rng());
        zero_params(&mut params);
        set_identity(&mut params, net.w1, 2);
        set_identity(&mut params, net.w2, 2);
        let mut tape = Tape::new();
        let x = tape.constant_matrix(&g.features);
        let out = net
            .forward(&mut tape, &params, &adj, x, false, &mut dummy_rng())
            .unwrap();
        assert_eq!(tape.value(out), &[0.0, 2.0]);
    }

    #[test]
    fn two_node_hand_propagation() {
        let g = build_graph(
            &[(0, 1)],
            2,
            Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]),
            vec![0, 1],
            2,
            "t",
        )
        .unwrap();
        let adj = normalize_adjacency(&g);
        let mut params = ParamSet::new();
        let net = GcnNetwork::new(&mut params, 2, 2, 2, 0.0, &mut dummy_rng());
        zero_params(&mut params);
        set_identity(&mut params, net.w1, 2);
        set_identity(&mut params, net.w2, 2);
        let mut tape = Tape::new();
        let x = tape.constant_matrix(&g.features);
        let out = net
            .forward(&mut tape, &params, &adj, x, false, &mut dummy_rng())
            .unwrap();
        for &v in tape.value(out) {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_equals_gcn_on_edgeless_graph() {
        let g = build_graph(
            &[],
            4,
            Matrix::from_rows(&[
                vec![0.3, -1.2],
                vec![1.1, 0.4],
                vec![-0.5, 0.9],
                vec![2.0, -0.7],
            ]),
            vec![0, 1, 0, 1],
            2,
            "t",
        )
        .unwrap();
        let adj = normalize_adjacency(&g);
        let mut params = ParamSet::new();
        let gcn = GcnNetwork::new(&mut params, 2, 3, 2, 0.0, &mut dummy_rng());
        let mlp = MlpNetwork {
            w1: gcn.w1,
            b1: gcn.b1,
            w2: gcn.w2,
            b2: gcn.b2,
            hidden_dim: 3,
            dropout_p: 0.0,
        };
        let mut tape = Tape::new();
        let x = tape.constant_matrix(&g.features);
        let a = gcn
            .forward(&mut tape, &params, &adj, x, false, &mut dummy_rng())
            .unwrap();
        let b = mlp
            .forward(&mut tape, &params, x, false, &mut dummy_rng())
            .unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn evaluate_classifier_tie_rules() {
        let zeros = Matrix::zeros(2, 3);
        assert_eq!(evaluate_classifier(&zeros, &[0, 0], &[0, 1]), 1.0);
        let logits = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(evaluate_classifier(&logits, &[0, 1], &[0, 1]), 1.0);
        let logits = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(evaluate_classifier(&logits, &[0, 1], &[0, 1]), 0.5);
    }

    #[test]
    fn training_reports_divergence_epoch() {
        // lr * wd > 2 makes the decoupled decay step multiply weights
        // by a growing factor each epoch, so the logits overflow and
        // the loss goes non-finite after a deterministic number of
        // epochs.
        let g = build_graph(
            &[(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)],
            10,
            Matrix::from_vec(10, 2, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()),
            (0..10).map(|i| i % 2).collect(),
            2,
            "t",
        )
        .unwrap();
        let adj = normalize_adjacency(&g);
        let splits = crate::data::generate_splits(10, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            learning_rate: 1.0,
            weight_decay: 10.0,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        match train_classifier(&g, &adj, &splits, &cfg) {
            Err(ModelError::Diverged { epoch }) => assert!(epoch > 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
