//! Shared fixtures for the criterion benches: one synthetic graph and
//! matching random matrices, big enough that the hot paths dominate
//! setup noise.

use gets_core::{
    generate_sbm, node_degrees, normalize_adjacency, GraphDataset, Matrix, NormalizedAdjacency,
    SbmConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BLOCKS: usize = 4;
pub const NODES_PER_BLOCK: usize = 500;

pub fn bench_graph() -> GraphDataset {
    generate_sbm(&SbmConfig {
        num_blocks: BLOCKS,
        nodes_per_block: NODES_PER_BLOCK,
        p_in: 0.02,
        p_out: 0.002,
        feature_dim: 16,
        feature_signal: 1.0,
        seed: 42,
    })
    .expect("valid config")
}

pub struct BenchSetup {
    pub graph: GraphDataset,
    pub adj: NormalizedAdjacency,
    pub degrees: Vec<usize>,
    pub logits: Matrix,
    pub probs: Matrix,
    pub labels: Vec<usize>,
}

pub fn bench_setup() -> BenchSetup {
    let graph = bench_graph();
    let adj = normalize_adjacency(&graph);
    let degrees = node_degrees(&graph);
    let n = graph.num_nodes;
    let k = graph.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let logits = Matrix::from_vec(n, k, data);
    let probs = logits.softmax_rows();
    let labels = graph.labels.clone();
    BenchSetup {
        graph,
        adj,
        degrees,
        logits,
        probs,
        labels,
    }
}

pub fn random_scores(rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Matrix::from_vec(rows, cols, data)
}
