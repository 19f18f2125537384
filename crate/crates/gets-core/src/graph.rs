//! Graph datasets and normalized sparse adjacency.
//!
//! Graphs are undirected and stored as a deduplicated list of canonical
//! `(u, v)` pairs with `u < v`. Propagation uses the symmetric
//! normalization `D^{-1/2} (A + I) D^{-1/2}` in CSR form, where the
//! degree used for normalization counts the added self loop.

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge ({u}, {v}) has endpoint out of range for {num_nodes} nodes")]
    EndpointOutOfRange {
        u: usize,
        v: usize,
        num_nodes: usize,
    },
    #[error("label {label} for node {node} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("expected {expected} labels, got {got}")]
    LabelCountMismatch { expected: usize, got: usize },
    #[error("feature matrix is {rows}x{cols}, expected {num_nodes} rows")]
    FeatureShapeMismatch {
        rows: usize,
        cols: usize,
        num_nodes: usize,
    },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("graph has no nodes")]
    Empty,
}

/// An undirected node-classification dataset.
///
/// `edges` holds each undirected edge exactly once as `(u, v)` with
/// `u < v`, sorted ascending. Self loops from the input are dropped;
/// normalization adds its own.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub name: String,
    pub num_nodes: usize,
    pub num_classes: usize,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

/// Sparse row-major matrix. Column indices are strictly increasing
/// within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub num_rows: usize,
    pub num_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Entries of row `i` as `(col, value)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let start = self.row_offsets[i];
        let end = self.row_offsets[i + 1];
        self.col_indices[start..end]
            .iter()
            .copied()
            .zip(self.values[start..end].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Dense product `self * x`.
    pub fn multiply_dense(&self, x: &Matrix) -> Matrix {
        assert_eq!(self.num_cols, x.rows(), "spmm shape mismatch");
        let cols = x.cols();
        let mut out = Matrix::zeros(self.num_rows, cols);
        for i in 0..self.num_rows {
            let start = self.row_offsets[i];
            let end = self.row_offsets[i + 1];
            let out_row = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for idx in start..end {
                let j = self.col_indices[idx];
                let v = self.values[idx];
                let x_row = &x.data()[j * cols..(j + 1) * cols];
                for (o, &xv) in out_row.iter_mut().zip(x_row) {
                    *o += v * xv;
                }
            }
        }
        out
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` plus the self-loop-inclusive degrees it
/// was built from.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub matrix: Arc<CsrMatrix>,
    /// `deg(i) + 1` for every node.
    pub degrees_with_self_loop: Vec<usize>,
}

/// Validates and canonicalizes an edge list into a dataset.
///
/// Accepts edges in any order and either direction; duplicates and
/// self pairs are dropped.
pub fn build_graph(
    edges: &[(usize, usize)],
    num_nodes: usize,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    name: &str,
) -> Result<GraphDataset, GraphError> {
    if num_nodes == 0 {
        return Err(GraphError::Empty);
    }
    if num_classes < 2 {
        return Err(GraphError::TooFewClasses(num_classes));
    }
    if features.rows() != num_nodes {
        return Err(GraphError::FeatureShapeMismatch {
            rows: features.rows(),
            cols: features.cols(),
            num_nodes,
        });
    }
    if labels.len() != num_nodes {
        return Err(GraphError::LabelCountMismatch {
            expected: num_nodes,
            got: labels.len(),
        });
    }
    for (node, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(GraphError::LabelOutOfRange {
                node,
                label,
                num_classes,
            });
        }
    }
    let mut canonical = BTreeSet::new();
    for &(u, v) in edges {
        if u >= num_nodes || v >= num_nodes {
            return Err(GraphError::EndpointOutOfRange { u, v, num_nodes });
        }
        if u == v {
            continue;
        }
        canonical.insert((u.min(v), u.max(v)));
    }
    Ok(GraphDataset {
        name: name.to_string(),
        num_nodes,
        num_classes,
        features,
        labels,
        edges: canonical.into_iter().collect(),
    })
}

/// Per-node degree, not counting the normalization self loop.
pub fn node_degrees(g: &GraphDataset) -> Vec<usize> {
    let mut deg = vec![0usize; g.num_nodes];
    for &(u, v) in &g.edges {
        deg[u] += 1;
        deg[v] += 1;
    }
    deg
}

/// Mean degree `2|E| / N`.
pub fn average_degree(g: &GraphDataset) -> f64 {
    2.0 * g.edges.len() as f64 / g.num_nodes as f64
}

/// Builds `D^{-1/2} (A + I) D^{-1/2}` in CSR form.
///
/// Entry `(i, j)` is `1 / sqrt((deg_i + 1)(deg_j + 1))`; an isolated
/// node keeps a diagonal 1.0.
pub fn normalize_adjacency(g: &GraphDataset) -> NormalizedAdjacency {
    let n = g.num_nodes;
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, v) in &g.edges {
        neighbors[u].push(v);
        neighbors[v].push(u);
    }
    let degrees_with_self_loop: Vec<usize> = neighbors.iter().map(|adj| adj.len() + 1).collect();
    let inv_sqrt: Vec<f64> = degrees_with_self_loop
        .iter()
        .map(|&d| 1.0 / (d as f64).sqrt())
        .collect();

    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    row_offsets.push(0);
    for i in 0..n {
        neighbors[i].push(i);
        neighbors[i].sort_unstable();
        for &j in &neighbors[i] {
            col_indices.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j]);
        }
        row_offsets.push(col_indices.len());
    }
    NormalizedAdjacency {
        matrix: Arc::new(CsrMatrix {
            num_rows: n,
            num_cols: n,
            row_offsets,
            col_indices,
            values,
        }),
        degrees_with_self_loop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trivial_features(n: usize) -> Matrix {
        Matrix::zeros(n, 1)
    }

    fn binary_labels(n: usize) -> Vec<usize> {
        (0..n).map(|i| i % 2).collect()
    }

    fn graph_from_edges(edges: &[(usize, usize)], n: usize) -> GraphDataset {
        build_graph(edges, n, trivial_features(n), binary_labels(n), 2, "t").unwrap()
    }

    #[test]
    fn duplicate_and_flipped_edges_stored_once() {
        let g = graph_from_edges(&[(0, 1), (1, 0), (0, 1)], 2);
        assert_eq!(g.edges, vec![(0, 1)]);
    }

    #[test]
    fn self_pairs_dropped() {
        let g = graph_from_edges(&[(0, 0), (0, 1)], 2);
        assert_eq!(g.edges, vec![(0, 1)]);
    }

    #[test]
    fn endpoint_out_of_range_rejected() {
        let err =
            build_graph(&[(0, 5)], 3, trivial_features(3), binary_labels(3), 2, "t").unwrap_err();
        assert_eq!(
            err,
            GraphError::EndpointOutOfRange {
                u: 0,
                v: 5,
                num_nodes: 3
            }
        );
    }

    #[test]
    fn label_out_of_range_rejected() {
        let err = build_graph(&[], 2, trivial_features(2), vec![0, 2], 2, "t").unwrap_err();
        assert_eq!(
            err,
            GraphError::LabelOutOfRange {
                node: 1,
                label: 2,
                num_classes: 2
            }
        );
    }

    #[test]
    fn path_graph_normalization_values() {
        let g = graph_from_edges(&[(0, 1), (1, 2)], 3);
        let adj = normalize_adjacency(&g);
        assert_eq!(adj.degrees_with_self_loop, vec![2, 3, 2]);
        let m = &adj.matrix;
        let entry = |i: usize, j: usize| m.row(i).find(|&(c, _)| c == j).map(|(_, v)| v);
        let expected_01 = 1.0 / 6.0_f64.sqrt();
        assert!((entry(0, 1).unwrap() - expected_01).abs() < 1e-12);
        assert!((entry(1, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((entry(0, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_keeps_unit_diagonal() {
        let g = graph_from_edges(&[(0, 1)], 3);
        let adj = normalize_adjacency(&g);
        let row: Vec<_> = adj.matrix.row(2).collect();
        assert_eq!(row, vec![(2, 1.0)]);
    }

    #[test]
    fn star_degrees() {
        let g = graph_from_edges(&[(0, 1), (0, 2), (0, 3)], 4);
        assert_eq!(node_degrees(&g), vec![3, 1, 1, 1]);
    }

    #[test]
    fn average_degree_triangle_and_edgeless() {
        let tri = graph_from_edges(&[(0, 1), (1, 2), (0, 2)], 3);
        assert!((average_degree(&tri) - 2.0).abs() < 1e-15);
        let empty = graph_from_edges(&[], 3);
        assert_eq!(average_degree(&empty), 0.0);
    }

    #[test]
    fn row_entry_count_is_degree_plus_one() {
        let g = graph_from_edges(&[(0, 1), (1, 2), (1, 3)], 4);
        let deg = node_degrees(&g);
        let adj = normalize_adjacency(&g);
        for (i, &d) in deg.iter().enumerate() {
            let count = adj.matrix.row_offsets[i + 1] - adj.matrix.row_offsets[i];
            assert_eq!(count, d + 1);
        }
    }

    #[test]
    fn build_is_invariant_to_order_and_direction() {
        let a = graph_from_edges(&[(0, 1), (1, 2), (2, 3)], 4);
        let b = graph_from_edges(&[(3, 2), (1, 0), (2, 1), (1, 2)], 4);
        assert_eq!(a.edges, b.edges);
        assert_eq!(
            normalize_adjacency(&a).matrix.as_ref(),
            normalize_adjacency(&b).matrix.as_ref()
        );
    }

    #[test]
    fn normalization_row_identity() {
        // Rows of the normalized matrix satisfy
        // sum_j A_hat(i, j) sqrt(d_j) = sqrt(d_i).
        let g = graph_from_edges(&[(0, 1), (1, 2), (1, 3), (2, 3), (3, 4)], 5);
        let adj = normalize_adjacency(&g);
        for i in 0..5 {
            let lhs: f64 = adj
                .matrix
                .row(i)
                .map(|(j, v)| v * (adj.degrees_with_self_loop[j] as f64).sqrt())
                .sum();
            let rhs = (adj.degrees_with_self_loop[i] as f64).sqrt();
            assert!((lhs - rhs).abs() < 1e-12, "row {i}: {lhs} vs {rhs}");
        }
    }
}
