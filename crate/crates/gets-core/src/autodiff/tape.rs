//! The recording tape and its operation set.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::params::{ParamId, ParamSet};
use crate::graph::CsrMatrix;
use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("{op}: node mask is empty")]
    EmptyMask { op: &'static str },
    #[error("{op}: divisor entries must be positive")]
    NonPositive { op: &'static str },
    #[error("top-k with k={k} is out of range for {m} columns")]
    InvalidTopK { k: usize, m: usize },
    #[error("dropout probability {0} must lie in [0, 1)")]
    InvalidDropout(f64),
}

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    Matmul(Var, Var),
    Spmm(Arc<CsrMatrix>, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Softplus(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    EmbeddingLookup(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    RowwiseDivide(Var, Var),
    RowwiseScale(Var, Var),
    RowAffine(Var, Var, Var),
    SliceCol(Var, usize),
    TopkSoftmax {
        scores: Var,
        k: usize,
        selected: Vec<usize>,
    },
    SoftmaxRows(Var),
    ConvexMix(Var, Vec<Var>),
    LogSoftmaxNll {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<usize>,
        probs: Vec<f64>,
    },
    NllProbs {
        probs: Var,
        labels: Vec<usize>,
        mask: Vec<usize>,
    },
    Sum(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run gradient tape. Build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const PROB_FLOOR: f64 = 1e-300;

fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest entries, largest first; ties prefer the
/// lower index.
pub(crate) fn topk_select(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on non-scalar node");
        n.value[0]
    }

    pub fn to_matrix(&self, v: Var) -> Matrix {
        let n = &self.nodes[v.0];
        Matrix::from_vec(n.rows, n.cols, n.value.clone())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push(rows, cols, value, Op::Constant, false)
    }

    pub fn constant_matrix(&mut self, m: &Matrix) -> Var {
        self.constant(m.rows(), m.cols(), m.data().to_vec())
    }

    /// Places a parameter's current value on the tape; backward will
    /// accumulate into its `grad`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let p = params.get(id);
        self.push(p.rows, p.cols, p.value.clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let mut out = vec![0.0; ar * bc];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..ar {
                for k in 0..ac {
                    let aik = av[i * ac + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * bc..(k + 1) * bc];
                    let orow = &mut out[i * bc..(i + 1) * bc];
                    for (o, &bv_) in orow.iter_mut().zip(brow) {
                        *o += aik * bv_;
                    }
                }
            }
        }
        let ng = self.tracked(a) || self.tracked(b);
        Ok(self.push(ar, bc, out, Op::Matmul(a, b), ng))
    }

    /// Sparse-dense product with a constant CSR matrix.
    pub fn spmm(&mut self, m: &Arc<CsrMatrix>, x: Var) -> Result<Var, AutodiffError> {
        let (xr, xc) = self.shape(x);
        if m.num_cols != xr {
            return Err(AutodiffError::ShapeMismatch {
                op: "spmm",
                lhs: (m.num_rows, m.num_cols),
                rhs: (xr, xc),
            });
        }
        let mut out = vec![0.0; m.num_rows * xc];
        {
            let xv = self.value(x);
            for i in 0..m.num_rows {
                let orow = &mut out[i * xc..(i + 1) * xc];
                for idx in m.row_offsets[i]..m.row_offsets[i + 1] {
                    let j = m.col_indices[idx];
                    let v = m.values[idx];
                    let xrow = &xv[j * xc..(j + 1) * xc];
                    for (o, &xv_) in orow.iter_mut().zip(xrow) {
                        *o += v * xv_;
                    }
                }
            }
        }
        let ng = self.tracked(x);
        Ok(self.push(m.num_rows, xc, out, Op::Spmm(Arc::clone(m), x), ng))
    }

    /// `x + b` with `b` a 1xD row broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xr, xc) = self.shape(x);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != xc {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row_bias",
                lhs: (xr, xc),
                rhs: (br, bc),
            });
        }
        let mut out = self.value(x).to_vec();
        {
            let bv = self.value(b);
            for i in 0..xr {
                for j in 0..xc {
                    out[i * xc + j] += bv[j];
                }
            }
        }
        let ng = self.tracked(x) || self.tracked(b);
        Ok(self.push(xr, xc, out, Op::AddRowBias(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.tracked(a) || self.tracked(b);
        Ok(self.push(sa.0, sa.1, out, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.tracked(a) || self.tracked(b);
        Ok(self.push(sa.0, sa.1, out, Op::Mul(a, b), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.tracked(x);
        self.push(r, c, out, Op::Relu(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| softplus_scalar(v)).collect();
        let ng = self.tracked(x);
        self.push(r, c, out, Op::Softplus(x), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cc) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.tracked(x);
        self.push(r, cc, out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let (r, cc) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| v + c).collect();
        let ng = self.tracked(x);
        self.push(r, cc, out, Op::AddScalar(x), ng)
    }

    /// Column-wise concatenation; all inputs must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let (rows, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (rows, 0),
                    rhs: (r, c),
                });
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let pv = self.value(p);
            for i in 0..rows {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let ng = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(rows, total, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Gathers rows of `table` by index; gradients scatter-add back.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        indices: &[usize],
    ) -> Result<Var, AutodiffError> {
        let (tr, tc) = self.shape(table);
        for &i in indices {
            if i >= tr {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: i,
                    bound: tr,
                });
            }
        }
        let mut out = vec![0.0; indices.len() * tc];
        {
            let tv = self.value(table);
            for (row, &i) in indices.iter().enumerate() {
                out[row * tc..(row + 1) * tc].copy_from_slice(&tv[i * tc..(i + 1) * tc]);
            }
        }
        let ng = self.tracked(table);
        Ok(self.push(
            indices.len(),
            tc,
            out,
            Op::EmbeddingLookup(table, indices.to_vec()),
            ng,
        ))
    }

    /// Inverted dropout: kept entries scale by `1/(1-p)`. Identity (the
    /// same `Var`, no node recorded) when `training` is false or `p == 0`.
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidDropout(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.shape(x);
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let ng = self.tracked(x);
        Ok(self.push(r, c, out, Op::Dropout(x, mask), ng))
    }

    /// Divides each row of `x` by the matching entry of the positive
    /// Nx1 column `t`.
    pub fn rowwise_divide(&mut self, x: Var, t: Var) -> Result<Var, AutodiffError> {
        let (xr, xc) = self.shape(x);
        let (tr, tc) = self.shape(t);
        if tr != xr || tc != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "rowwise_divide",
                lhs: (xr, xc),
                rhs: (tr, tc),
            });
        }
        if self.value(t).iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::NonPositive {
                op: "rowwise_divide",
            });
        }
        let mut out = vec![0.0; xr * xc];
        {
            let xv = self.value(x);
            let tv = self.value(t);
            for i in 0..xr {
                let ti = tv[i];
                for j in 0..xc {
                    out[i * xc + j] = xv[i * xc + j] / ti;
                }
            }
        }
        let ng = self.tracked(x) || self.tracked(t);
        Ok(self.push(xr, xc, out, Op::RowwiseDivide(x, t), ng))
    }

    /// Multiplies each row of `x` by the matching entry of the Nx1
    /// column `s`.
    pub fn rowwise_scale(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        let (xr, xc) = self.shape(x);
        let (sr, sc) = self.shape(s);
        if sr != xr || sc != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "rowwise_scale",
                lhs: (xr, xc),
                rhs: (sr, sc),
            });
        }
        let mut out = vec![0.0; xr * xc];
        {
            let xv = self.value(x);
            let sv = self.value(s);
            for i in 0..xr {
                let si = sv[i];
                for j in 0..xc {
                    out[i * xc + j] = xv[i * xc + j] * si;
                }
            }
        }
        let ng = self.tracked(x) || self.tracked(s);
        Ok(self.push(xr, xc, out, Op::RowwiseScale(x, s), ng))
    }

    /// `z * t + b` with `t` and `b` 1xK rows broadcast over rows of `z`.
    pub fn row_affine(&mut self, z: Var, t: Var, b: Var) -> Result<Var, AutodiffError> {
        let (zr, zc) = self.shape(z);
        for v in [t, b] {
            let s = self.shape(v);
            if s != (1, zc) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "row_affine",
                    lhs: (zr, zc),
                    rhs: s,
                });
            }
        }
        let mut out = vec![0.0; zr * zc];
        {
            let zv = self.value(z);
            let tv = self.value(t);
            let bv = self.value(b);
            for i in 0..zr {
                for j in 0..zc {
                    out[i * zc + j] = zv[i * zc + j] * tv[j] + bv[j];
                }
            }
        }
        let ng = self.tracked(z) || self.tracked(t) || self.tracked(b);
        Ok(self.push(zr, zc, out, Op::RowAffine(z, t, b), ng))
    }

    /// Column `j` of `x` as an Nx1 matrix.
    pub fn slice_col(&mut self, x: Var, j: usize) -> Result<Var, AutodiffError> {
        let (xr, xc) = self.shape(x);
        if j >= xc {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_col",
                index: j,
                bound: xc,
            });
        }
        let out: Vec<f64> = (0..xr).map(|i| self.value(x)[i * xc + j]).collect();
        let ng = self.tracked(x);
        Ok(self.push(xr, 1, out, Op::SliceCol(x, j), ng))
    }

    /// Per row: keep the `k` largest scores (ties prefer the lower
    /// index), softmax over the kept entries, zero elsewhere.
    pub fn topk_softmax(&mut self, scores: Var, k: usize) -> Result<Var, AutodiffError> {
        let (r, m) = self.shape(scores);
        if k == 0 || k > m {
            return Err(AutodiffError::InvalidTopK { k, m });
        }
        let mut out = vec![0.0; r * m];
        let mut selected = Vec::with_capacity(r * k);
        {
            let sv = self.value(scores);
            for i in 0..r {
                let row = &sv[i * m..(i + 1) * m];
                let sel = topk_select(row, k);
                let max = sel
                    .iter()
                    .map(|&j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &j in &sel {
                    let e = (row[j] - max).exp();
                    out[i * m + j] = e;
                    denom += e;
                }
                for &j in &sel {
                    out[i * m + j] /= denom;
                }
                selected.extend_from_slice(&sel);
            }
        }
        let ng = self.tracked(scores);
        Ok(self.push(
            r,
            m,
            out,
            Op::TopkSoftmax {
                scores,
                k,
                selected,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            crate::matrix::softmax_into(
                &self.value(x)[i * c..(i + 1) * c],
                &mut out[i * c..(i + 1) * c],
            );
        }
        let ng = self.tracked(x);
        self.push(r, c, out, Op::SoftmaxRows(x), ng)
    }

    /// `sum_j w[j] * comps[j]` with `w` a 1xM row and M same-shaped
    /// components.
    pub fn convex_mix(&mut self, w: Var, comps: &[Var]) -> Result<Var, AutodiffError> {
        let (wr, wc) = self.shape(w);
        if wr != 1 || wc != comps.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "convex_mix",
                lhs: (wr, wc),
                rhs: (1, comps.len()),
            });
        }
        assert!(!comps.is_empty(), "convex_mix needs at least one component");
        let (r, c) = self.shape(comps[0]);
        for &comp in comps {
            if self.shape(comp) != (r, c) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "convex_mix",
                    lhs: (r, c),
                    rhs: self.shape(comp),
                });
            }
        }
        let mut out = vec![0.0; r * c];
        for (j, &comp) in comps.iter().enumerate() {
            let wj = self.value(w)[j];
            for (o, &v) in out.iter_mut().zip(self.value(comp)) {
                *o += wj * v;
            }
        }
        let ng = self.tracked(w) || comps.iter().any(|&cv| self.tracked(cv));
        Ok(self.push(r, c, out, Op::ConvexMix(w, comps.to_vec()), ng))
    }

    /// Mean negative log-likelihood of `labels` under row-wise
    /// log-softmax of `logits`, averaged over `mask`.
    pub fn log_softmax_nll(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: &[usize],
    ) -> Result<Var, AutodiffError> {
        let (n, k) = self.shape(logits);
        if labels.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "log_softmax_nll",
                lhs: (n, k),
                rhs: (labels.len(), 1),
            });
        }
        if mask.is_empty() {
            return Err(AutodiffError::EmptyMask {
                op: "log_softmax_nll",
            });
        }
        for &i in mask {
            if i >= n {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "log_softmax_nll",
                    index: i,
                    bound: n,
                });
            }
            if labels[i] >= k {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "log_softmax_nll",
                    index: labels[i],
                    bound: k,
                });
            }
        }
        let mut probs = vec![0.0; mask.len() * k];
        let mut total = 0.0;
        {
            let zv = self.value(logits);
            for (mi, &i) in mask.iter().enumerate() {
                let row = &zv[i * k..(i + 1) * k];
                crate::matrix::softmax_into(row, &mut probs[mi * k..(mi + 1) * k]);
                let lse = crate::matrix::log_sum_exp(row);
                total += lse - row[labels[i]];
            }
        }
        let loss = total / mask.len() as f64;
        let ng = self.tracked(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::LogSoftmaxNll {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean negative log of the labeled probability, averaged over
    /// `mask`. Probabilities are floored at 1e-300 inside the log.
    pub fn nll_probs(
        &mut self,
        probs: Var,
        labels: &[usize],
        mask: &[usize],
    ) -> Result<Var, AutodiffError> {
        let (n, k) = self.shape(probs);
        if labels.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "nll_probs",
                lhs: (n, k),
                rhs: (labels.len(), 1),
            });
        }
        if mask.is_empty() {
            return Err(AutodiffError::EmptyMask { op: "nll_probs" });
        }
        let mut total = 0.0;
        for &i in mask {
            if i >= n || labels[i] >= k {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "nll_probs",
                    index: i,
                    bound: n,
                });
            }
            total -= self.value(probs)[i * k + labels[i]].max(PROB_FLOOR).ln();
        }
        let loss = total / mask.len() as f64;
        let ng = self.tracked(probs);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::NllProbs {
                probs,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().sum();
        let ng = self.tracked(x);
        self.push(1, 1, vec![total], Op::Sum(x), ng)
    }

    /// Accumulates `d loss / d param` into every reachable parameter's
    /// `grad`. Repeated calls without `zero_grads` keep accumulating.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<(), AutodiffError> {
        let (lr, lc) = self.shape(loss);
        if (lr, lc) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows: lr, cols: lc });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = params.get_mut(*id);
                    for (pg, &gv) in p.grad.iter_mut().zip(&g) {
                        *pg += gv;
                    }
                }
                Op::Matmul(a, b) => {
                    let (ar, ac) = self.shape(*a);
                    let (_, bc) = self.shape(*b);
                    if self.tracked(*a) {
                        let bv = self.value(*b);
                        let ga = self.grad_buf(&mut grads, *a);
                        for i in 0..ar {
                            for k in 0..ac {
                                let mut acc = 0.0;
                                let grow = &g[i * bc..(i + 1) * bc];
                                let brow = &bv[k * bc..(k + 1) * bc];
                                for (gv, bvv) in grow.iter().zip(brow) {
                                    acc += gv * bvv;
                                }
                                ga[i * ac + k] += acc;
                            }
                        }
                    }
                    if self.tracked(*b) {
                        let av = self.value(*a);
                        let gb = self.grad_buf(&mut grads, *b);
                        for i in 0..ar {
                            for k in 0..ac {
                                let aik = av[i * ac + k];
                                if aik == 0.0 {
                                    continue;
                                }
                                let grow = &g[i * bc..(i + 1) * bc];
                                let gbrow = &mut gb[k * bc..(k + 1) * bc];
                                for (gbv, &gv) in gbrow.iter_mut().zip(grow) {
                                    *gbv += aik * gv;
                                }
                            }
                        }
                    }
                }
                Op::Spmm(m, x) => {
                    if self.tracked(*x) {
                        let (_, xc) = self.shape(*x);
                        let gx = self.grad_buf(&mut grads, *x);
                        for i in 0..m.num_rows {
                            let grow = &g[i * xc..(i + 1) * xc];
                            for idx2 in m.row_offsets[i]..m.row_offsets[i + 1] {
                                let j = m.col_indices[idx2];
                                let v = m.values[idx2];
                                let gxrow = &mut gx[j * xc..(j + 1) * xc];
                                for (gxv, &gv) in gxrow.iter_mut().zip(grow) {
                                    *gxv += v * gv;
                                }
                            }
                        }
                    }
                }
                Op::AddRowBias(x, b) => {
                    let (xr, xc) = self.shape(*x);
                    if self.tracked(*x) {
                        let gx = self.grad_buf(&mut grads, *x);
                        for (gxv, &gv) in gx.iter_mut().zip(&g) {
                            *gxv += gv;
                        }
                    }
                    if self.tracked(*b) {
                        let gb = self.grad_buf(&mut grads, *b);
                        for i in 0..xr {
                            for j in 0..xc {
                                gb[j] += g[i * xc + j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &inp in [a, b].iter() {
                        if self.tracked(*inp) {
                            let gi = self.grad_buf(&mut grads, *inp);
                            for (giv, &gv) in gi.iter_mut().zip(&g) {
                                *giv += gv;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        let bv = self.value(*b).to_vec();
                        let ga = self.grad_buf(&mut grads, *a);
                        for ((gav, &gv), bvv) in ga.iter_mut().zip(&g).zip(bv) {
                            *gav += gv * bvv;
                        }
                    }
                    if self.tracked(*b) {
                        let av = self.value(*a).to_vec();
                        let gb = self.grad_buf(&mut grads, *b);
                        for ((gbv, &gv), avv) in gb.iter_mut().zip(&g).zip(av) {
                            *gbv += gv * avv;
                        }
                    }
                }
                Op::Relu(x) => {
                    if self.tracked(*x) {
                        let xv = self.value(*x).to_vec();
                        let gx = self.grad_buf(&mut grads, *x);
                        for ((gxv, &gv), xvv) in gx.iter_mut().zip(&g).zip(xv) {
                            if xvv > 0.0 {
                                *gxv += gv;
                            }
                        }
                    }
                }
                Op::Softplus(x) => {
                    if self.tracked(*x) {
                        let xv = self.value(*x).to_vec();
                        let gx = self.grad_buf(&mut grads, *x);
                        for ((gxv, &gv), xvv) in gx.iter_mut().zip(&g).zip(xv) {
                            *gxv += gv * sigmoid(xvv);
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if self.tracked(*x) {
                        let c = *c;
                        let gx = self.grad_buf(&mut grads, *x);
                        for (gxv, &gv) in gx.iter_mut().zip(&g) {
                            *gxv += gv * c;
                        }
                    }
                }
                Op::AddScalar(x) => {
                    if self.tracked(*x) {
                        let gx = self.grad_buf(&mut grads, *x);
                        for (gxv, &gv) in gx.iter_mut().zip(&g) {
                            *gxv += gv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.cols;
                    let rows = node.rows;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, c) = self.shape(p);
                        if self.tracked(p) {
                            let gp = self.grad_buf(&mut grads, p);
                            for i in 0..rows {
                                for j in 0..c {
                                    gp[i * c + j] += g[i * total + offset + j];
                                }
                            }
                        }
                        offset += c;
                    }
                }
                Op::EmbeddingLookup(table, indices) => {
                    if self.tracked(*table) {
                        let (_, tc) = self.shape(*table);
                        let gt = self.grad_buf(&mut grads, *table);
                        for (row, &i) in indices.iter().enumerate() {
                            for j in 0..tc {
                                gt[i * tc + j] += g[row * tc + j];
                            }
                        }
                    }
                }
                Op::Dropout(x, mask) => {
                    if self.tracked(*x) {
                        let gx = self.grad_buf(&mut grads, *x);
                        for ((gxv, &gv), &m) in gx.iter_mut().zip(&g).zip(mask) {
                            *gxv += gv * m;
                        }
                    }
                }
                Op::RowwiseDivide(x, t) => {
                    let (xr, xc) = self.shape(*x);
                    let tv = self.value(*t).to_vec();
                    if self.tracked(*x) {
                        let gx = self.grad_buf(&mut grads, *x);
                        for i in 0..xr {
                            let ti = tv[i];
                            for j in 0..xc {
                                gx[i * xc + j] += g[i * xc + j] / ti;
                            }
                        }
                    }
                    if self.tracked(*t) {
                        let xv = self.value(*x).to_vec();
                        let gt = self.grad_buf(&mut grads, *t);
                        for i in 0..xr {
                            let ti = tv[i];
                            let mut acc = 0.0;
                            for j in 0..xc {
                                acc += g[i * xc + j] * xv[i * xc + j];
                            }
                            gt[i] -= acc / (ti * ti);
                        }
                    }
                }
                Op::RowwiseScale(x, s) => {
                    let (xr, xc) = self.shape(*x);
                    if self.tracked(*x) {
                        let sv = self.value(*s).to_vec();
                        let gx = self.grad_buf(&mut grads, *x);
                        for i in 0..xr {
                            let si = sv[i];
                            for j in 0..xc {
                                gx[i * xc + j] += g[i * xc + j] * si;
                            }
                        }
                    }
                    if self.tracked(*s) {
                        let xv = self.value(*x).to_vec();
                        let gs = self.grad_buf(&mut grads, *s);
                        for i in 0..xr {
                            let mut acc = 0.0;
                            for j in 0..xc {
                                acc += g[i * xc + j] * xv[i * xc + j];
                            }
                            gs[i] += acc;
                        }
                    }
                }
                Op::RowAffine(z, t, b) => {
                    let (zr, zc) = self.shape(*z);
                    let tv = self.value(*t).to_vec();
                    if self.tracked(*z) {
                        let gz = self.grad_buf(&mut grads, *z);
                        for i in 0..zr {
                            for j in 0..zc {
                                gz[i * zc + j] += g[i * zc + j] * tv[j];
                            }
                        }
                    }
                    if self.tracked(*t) {
                        let zv = self.value(*z).to_vec();
                        let gt = self.grad_buf(&mut grads, *t);
                        for i in 0..zr {
                            for j in 0..zc {
                                gt[j] += g[i * zc + j] * zv[i * zc + j];
                            }
                        }
                    }
                    if self.tracked(*b) {
                        let gb = self.grad_buf(&mut grads, *b);
                        for i in 0..zr {
                            for j in 0..zc {
                                gb[j] += g[i * zc + j];
                            }
                        }
                    }
                }
                Op::SliceCol(x, j) => {
                    if self.tracked(*x) {
                        let (xr, xc) = self.shape(*x);
                        let gx = self.grad_buf(&mut grads, *x);
                        for i in 0..xr {
                            gx[i * xc + j] += g[i];
                        }
                    }
                }
                Op::TopkSoftmax {
                    scores,
                    k,
                    selected,
                } => {
                    if self.tracked(*scores) {
                        let (r, m) = self.shape(*scores);
                        let wv = node.value.clone();
                        let gs = self.grad_buf(&mut grads, *scores);
                        for i in 0..r {
                            let sel = &selected[i * k..(i + 1) * k];
                            let mut dot = 0.0;
                            for &j in sel {
                                dot += g[i * m + j] * wv[i * m + j];
                            }
                            for &j in sel {
                                let w = wv[i * m + j];
                                gs[i * m + j] += w * (g[i * m + j] - dot);
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.tracked(*x) {
                        let (r, c) = self.shape(*x);
                        let pv = node.value.clone();
                        let gx = self.grad_buf(&mut grads, *x);
                        for i in 0..r {
                            let prow = &pv[i * c..(i + 1) * c];
                            let grow = &g[i * c..(i + 1) * c];
                            let dot: f64 = prow.iter().zip(grow).map(|(&p, &gv)| p * gv).sum();
                            for j in 0..c {
                                gx[i * c + j] += prow[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
                Op::ConvexMix(w, comps) => {
                    let gw_needed = self.tracked(*w);
                    let wv = self.value(*w).to_vec();
                    for (j, &comp) in comps.iter().enumerate() {
                        if gw_needed {
                            let cv = self.value(comp);
                            let acc: f64 = cv.iter().zip(&g).map(|(&c, &gv)| c * gv).sum();
                            self.grad_buf(&mut grads, *w)[j] += acc;
                        }
                        if self.tracked(comp) {
                            let wj = wv[j];
                            let gc = self.grad_buf(&mut grads, comp);
                            for (gcv, &gv) in gc.iter_mut().zip(&g) {
                                *gcv += wj * gv;
                            }
                        }
                    }
                }
                Op::LogSoftmaxNll {
                    logits,
                    labels,
                    mask,
                    probs,
                } => {
                    if self.tracked(*logits) {
                        let (_, k) = self.shape(*logits);
                        let scale = g[0] / mask.len() as f64;
                        let gz = self.grad_buf(&mut grads, *logits);
                        for (mi, &i) in mask.iter().enumerate() {
                            for j in 0..k {
                                let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                                gz[i * k + j] += scale * (probs[mi * k + j] - indicator);
                            }
                        }
                    }
                }
                Op::NllProbs {
                    probs,
                    labels,
                    mask,
                } => {
                    if self.tracked(*probs) {
                        let (_, k) = self.shape(*probs);
                        let pv = self.value(*probs).to_vec();
                        let scale = g[0] / mask.len() as f64;
                        let gp = self.grad_buf(&mut grads, *probs);
                        for &i in mask {
                            let p = pv[i * k + labels[i]].max(PROB_FLOOR);
                            gp[i * k + labels[i]] -= scale / p;
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.tracked(*x) {
                        let gx = self.grad_buf(&mut grads, *x);
                        for gxv in gx.iter_mut() {
                            *gxv += g[0];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| vec![0.0; r * c])
    }
}
