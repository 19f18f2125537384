//! Calibration metrics: equal-mass ECE, degree-binned ECE, VarECE,
//! reliability statistics, accuracy, NLL.
//!
//! Confidence is the row maximum of the probability matrix and the
//! prediction is the row argmax with ties resolved to the lowest class
//! index. Bins are equal-mass: nodes sorted ascending by the binning
//! key (stable, ties by node index), with the first `N mod B` bins
//! holding one extra node. ECE is kept as a fraction internally;
//! tables multiply by 100 for display.

use thiserror::Error;

use crate::matrix::Matrix;

pub const DEFAULT_BINS: usize = 10;
const NLL_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("probability row {row} sums to {sum}, expected 1 within 1e-6")]
    NotNormalized { row: usize, sum: f64 },
    #[error("mask is empty")]
    EmptyMask,
    #[error("bin count must be at least 1")]
    NoBins,
    #[error("mask index {index} out of range for {num_nodes} nodes")]
    MaskOutOfRange { index: usize, num_nodes: usize },
    #[error("label {label} at node {node} out of range for {num_classes} classes")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("degree vector has {got} entries, expected {expected}")]
    DegreeLengthMismatch { expected: usize, got: usize },
    #[error("all bins are empty")]
    EmptyBins,
}

/// Per-bin reliability statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub bin_index: usize,
    pub node_count: usize,
    pub avg_confidence: f64,
    pub accuracy: f64,
}

/// Bundle of every calibration metric for one probability matrix.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub ece: f64,
    pub accuracy: f64,
    pub nll: f64,
    pub var_ece: f64,
    pub bins: Vec<BinStats>,
    pub degree_bins: Vec<BinStats>,
}

/// Equal-mass binning of `values`. Returns, per bin, the indices into
/// `values` it holds. Sorting is ascending and stable (ties keep input
/// order); the first `N mod B` bins receive `ceil(N/B)` entries, the
/// rest `floor(N/B)`.
pub fn equal_mass_bins(values: &[f64], bins: usize) -> Vec<Vec<usize>> {
    assert!(bins >= 1, "bins must be >= 1");
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let base = n / bins;
    let extra = n % bins;
    let mut out = Vec::with_capacity(bins);
    let mut cursor = 0;
    for b in 0..bins {
        let size = if b < extra { base + 1 } else { base };
        out.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    out
}

fn validate_inputs(
    probs: &Matrix,
    labels: &[usize],
    mask: &[usize],
    check_rows: bool,
) -> Result<(), MetricsError> {
    if mask.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    for &i in mask {
        if i >= probs.rows() {
            return Err(MetricsError::MaskOutOfRange {
                index: i,
                num_nodes: probs.rows(),
            });
        }
        if labels[i] >= probs.cols() {
            return Err(MetricsError::LabelOutOfRange {
                node: i,
                label: labels[i],
                num_classes: probs.cols(),
            });
        }
        if check_rows {
            let sum: f64 = probs.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(MetricsError::NotNormalized { row: i, sum });
            }
        }
    }
    Ok(())
}

/// Per masked node: `(confidence, correct)`.
fn confidences_and_hits(probs: &Matrix, labels: &[usize], mask: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let mut conf = Vec::with_capacity(mask.len());
    let mut hit = Vec::with_capacity(mask.len());
    for &i in mask {
        let pred = probs.argmax_row(i);
        conf.push(probs.get(i, pred));
        hit.push(pred == labels[i]);
    }
    (conf, hit)
}

fn bins_to_stats(assignment: &[Vec<usize>], conf: &[f64], hit: &[bool]) -> Vec<BinStats> {
    assignment
        .iter()
        .enumerate()
        .map(|(b, members)| {
            if members.is_empty() {
                return BinStats {
                    bin_index: b,
                    node_count: 0,
                    avg_confidence: 0.0,
                    accuracy: 0.0,
                };
            }
            let count = members.len() as f64;
            let avg_confidence = members.iter().map(|&i| conf[i]).sum::<f64>() / count;
            let accuracy = members.iter().filter(|&&i| hit[i]).count() as f64 / count;
            BinStats {
                bin_index: b,
                node_count: members.len(),
                avg_confidence,
                accuracy,
            }
        })
        .collect()
}

fn weighted_gap_sum(stats: &[BinStats]) -> f64 {
    let total: usize = stats.iter().map(|s| s.node_count).sum();
    stats
        .iter()
        .map(|s| (s.node_count as f64 / total as f64) * (s.accuracy - s.avg_confidence).abs())
        .sum()
}

/// Expected calibration error over `mask` with `bins` equal-mass
/// confidence bins, plus the per-bin statistics.
pub fn ece(
    probs: &Matrix,
    labels: &[usize],
    mask: &[usize],
    bins: usize,
) -> Result<(f64, Vec<BinStats>), MetricsError> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    validate_inputs(probs, labels, mask, true)?;
    let (conf, hit) = confidences_and_hits(probs, labels, mask);
    let assignment = equal_mass_bins(&conf, bins);
    let stats = bins_to_stats(&assignment, &conf, &hit);
    Ok((weighted_gap_sum(&stats), stats))
}

/// ECE with equal-mass bins over node degree instead of confidence.
/// Bins are ordered by ascending average degree.
pub fn degree_binned_ece(
    probs: &Matrix,
    labels: &[usize],
    degrees: &[usize],
    mask: &[usize],
    bins: usize,
) -> Result<(f64, Vec<BinStats>), MetricsError> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    if degrees.len() != probs.rows() {
        return Err(MetricsError::DegreeLengthMismatch {
            expected: probs.rows(),
            got: degrees.len(),
        });
    }
    validate_inputs(probs, labels, mask, true)?;
    let (conf, hit) = confidences_and_hits(probs, labels, mask);
    let masked_degrees: Vec<f64> = mask.iter().map(|&i| degrees[i] as f64).collect();
    let assignment = equal_mass_bins(&masked_degrees, bins);
    let stats = bins_to_stats(&assignment, &conf, &hit);
    Ok((weighted_gap_sum(&stats), stats))
}

/// Population variance of the per-bin weighted gap terms
/// `(|D_j|/N) |Acc - Conf|`. Empty bins contribute a zero term.
pub fn var_ece(stats: &[BinStats]) -> Result<f64, MetricsError> {
    let total: usize = stats.iter().map(|s| s.node_count).sum();
    if total == 0 {
        return Err(MetricsError::EmptyBins);
    }
    let terms: Vec<f64> = stats
        .iter()
        .map(|s| (s.node_count as f64 / total as f64) * (s.accuracy - s.avg_confidence).abs())
        .collect();
    let mean = terms.iter().sum::<f64>() / terms.len() as f64;
    Ok(terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / terms.len() as f64)
}

/// Per-bin statistics with the same confidence binning as [`ece`].
pub fn reliability_report(
    probs: &Matrix,
    labels: &[usize],
    mask: &[usize],
    bins: usize,
) -> Result<Vec<BinStats>, MetricsError> {
    ece(probs, labels, mask, bins).map(|(_, stats)| stats)
}

/// Accuracy (lowest-index tie rule) and mean NLL over `mask`.
/// Probabilities are floored at 1e-300 inside the log.
pub fn accuracy_and_nll(
    probs: &Matrix,
    labels: &[usize],
    mask: &[usize],
) -> Result<(f64, f64), MetricsError> {
    validate_inputs(probs, labels, mask, false)?;
    let mut correct = 0usize;
    let mut nll = 0.0;
    for &i in mask {
        if probs.argmax_row(i) == labels[i] {
            correct += 1;
        }
        nll -= probs.get(i, labels[i]).max(NLL_FLOOR).ln();
    }
    let n = mask.len() as f64;
    Ok((correct as f64 / n, nll / n))
}

/// Mean NLL over `mask` straight from logits, stabilized with
/// log-sum-exp. Equivalent to softmax followed by [`accuracy_and_nll`]
/// but without materializing the probabilities.
pub fn nll_from_logits(logits: &Matrix, labels: &[usize], mask: &[usize]) -> f64 {
    assert!(!mask.is_empty(), "nll_from_logits: mask is empty");
    let mut nll = 0.0;
    for &i in mask {
        let row = logits.row(i);
        nll += crate::matrix::log_sum_exp(row) - row[labels[i]];
    }
    nll / mask.len() as f64
}

/// Every metric in one pass: confidence-binned ECE, accuracy, NLL, and
/// VarECE over the degree bins.
pub fn evaluate_calibration(
    probs: &Matrix,
    labels: &[usize],
    degrees: &[usize],
    mask: &[usize],
    bins: usize,
) -> Result<CalibrationReport, MetricsError> {
    let (ece_value, conf_bins) = ece(probs, labels, mask, bins)?;
    let (_, degree_bins) = degree_binned_ece(probs, labels, degrees, mask, bins)?;
    let var = var_ece(&degree_bins)?;
    let (accuracy, nll) = accuracy_and_nll(probs, labels, mask)?;
    Ok(CalibrationReport {
        ece: ece_value,
        accuracy,
        nll,
        var_ece: var,
        bins: conf_bins,
        degree_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    /// Binary rows with the requested confidence; `correct[i]` selects
    /// whether the label matches the argmax.
    fn binary_case(conf: &[f64], correct: &[bool]) -> (Matrix, Vec<usize>) {
        let rows: Vec<Vec<f64>> = conf.iter().map(|&c| vec![c, 1.0 - c]).collect();
        let labels = correct.iter().map(|&c| if c { 0 } else { 1 }).collect();
        (Matrix::from_rows(&rows), labels)
    }

    #[test]
    fn equal_mass_bins_hand_cases() {
        let bins = equal_mass_bins(&[0.6, 0.9, 0.7, 0.8], 2);
        assert_eq!(bins, vec![vec![0, 2], vec![3, 1]]);

        let sizes: Vec<usize> = equal_mass_bins(&[0.1, 0.2, 0.3, 0.4, 0.5], 2)
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![3, 2]);

        let ten = equal_mass_bins(&[0.3, 0.1, 0.2], 10);
        let sizes: Vec<usize> = ten.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn equal_mass_bins_stable_on_ties() {
        let bins = equal_mass_bins(&[0.5, 0.5, 0.5, 0.5], 2);
        assert_eq!(bins, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn perfect_predictor_has_zero_ece() {
        let (probs, labels) = binary_case(&[1.0, 1.0, 1.0], &[true, true, true]);
        let (e, _) = ece(&probs, &labels, &all(3), 10).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn hand_case_ece_is_0_15() {
        let (probs, labels) = binary_case(&[0.6, 0.7, 0.8, 0.9], &[false, true, true, true]);
        let (e, stats) = ece(&probs, &labels, &all(4), 2).unwrap();
        assert!((e - 0.15).abs() < 1e-12, "ece {e}");
        assert!((stats[0].avg_confidence - 0.65).abs() < 1e-12);
        assert!((stats[0].accuracy - 0.5).abs() < 1e-12);
        assert!((stats[1].avg_confidence - 0.85).abs() < 1e-12);
        assert!((stats[1].accuracy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_normalized_rows_rejected() {
        let probs = Matrix::from_rows(&[vec![0.9, 0.9]]);
        let err = ece(&probs, &[0], &[0], 2).unwrap_err();
        assert!(matches!(err, MetricsError::NotNormalized { row: 0, .. }));
    }

    #[test]
    fn bin_counts_conserve_masked_nodes() {
        let (probs, labels) = binary_case(
            &[0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85],
            &[true, false, true, true, false, true, true],
        );
        let mask = vec![0, 2, 3, 5, 6];
        let (_, stats) = ece(&probs, &labels, &mask, 3).unwrap();
        let total: usize = stats.iter().map(|s| s.node_count).sum();
        assert_eq!(total, mask.len());
    }

    #[test]
    fn degree_bins_split_star_by_degree() {
        // 2-leaf star: degrees [2, 1, 1]; ascending sort puts the two
        // leaves in the first bin and the center alone in the second.
        let (probs, labels) = binary_case(&[0.9, 0.8, 0.7], &[true, true, false]);
        let degrees = vec![2, 1, 1];
        let (_, stats) = degree_binned_ece(&probs, &labels, &degrees, &all(3), 2).unwrap();
        assert_eq!(stats[0].node_count, 2);
        assert_eq!(stats[1].node_count, 1);
        assert!((stats[1].avg_confidence - 0.9).abs() < 1e-12);
    }

    #[test]
    fn degree_binned_single_bin_is_overall_gap() {
        let (probs, labels) = binary_case(&[0.6, 0.7, 0.95], &[true, false, true]);
        let degrees = vec![3, 1, 2];
        let (e, _) = degree_binned_ece(&probs, &labels, &degrees, &all(3), 1).unwrap();
        let mean_conf = (0.6_f64 + 0.7 + 0.95) / 3.0;
        let acc = 2.0_f64 / 3.0;
        assert!((e - (acc - mean_conf).abs()).abs() < 1e-12);
    }

    #[test]
    fn var_ece_hand_cases() {
        let uniform = vec![
            BinStats {
                bin_index: 0,
                node_count: 5,
                avg_confidence: 0.8,
                accuracy: 0.6,
            },
            BinStats {
                bin_index: 1,
                node_count: 5,
                avg_confidence: 0.9,
                accuracy: 0.7,
            },
        ];
        assert_eq!(var_ece(&uniform).unwrap(), 0.0);

        let two = vec![
            BinStats {
                bin_index: 0,
                node_count: 5,
                avg_confidence: 0.7,
                accuracy: 0.6,
            },
            BinStats {
                bin_index: 1,
                node_count: 5,
                avg_confidence: 0.9,
                accuracy: 0.6,
            },
        ];
        assert!((var_ece(&two).unwrap() - 0.0025).abs() < 1e-12);
    }

    #[test]
    fn var_ece_rejects_all_empty() {
        let stats = vec![BinStats {
            bin_index: 0,
            node_count: 0,
            avg_confidence: 0.0,
            accuracy: 0.0,
        }];
        assert_eq!(var_ece(&stats).unwrap_err(), MetricsError::EmptyBins);
    }

    #[test]
    fn reliability_matches_ece_binning() {
        let (probs, labels) = binary_case(&[0.6, 0.7, 0.8, 0.9], &[false, true, true, true]);
        let stats = reliability_report(&probs, &labels, &all(4), 2).unwrap();
        let (_, from_ece) = ece(&probs, &labels, &all(4), 2).unwrap();
        assert_eq!(stats, from_ece);
    }

    #[test]
    fn uniform_probability_bins_have_half_confidence() {
        let probs = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let stats = reliability_report(&probs, &[0, 1], &all(2), 1).unwrap();
        assert!((stats[0].avg_confidence - 0.5).abs() < 1e-12);
    }

    #[test]
    fn accuracy_and_nll_hand_cases() {
        let probs = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let (acc, nll) = accuracy_and_nll(&probs, &[0], &[0]).unwrap();
        assert_eq!((acc, nll), (1.0, 0.0));

        let probs = Matrix::from_rows(&[vec![0.5, 0.5]]);
        let (acc, nll) = accuracy_and_nll(&probs, &[1], &[0]).unwrap();
        assert_eq!(acc, 0.0);
        assert!((nll - 2.0_f64.ln()).abs() < 1e-12);

        let probs = Matrix::from_rows(&[vec![0.8, 0.2], vec![0.4, 0.6]]);
        let (acc, nll) = accuracy_and_nll(&probs, &[0, 0], &[0, 1]).unwrap();
        assert_eq!(acc, 0.5);
        let expected = (-(0.8_f64.ln()) - 0.4_f64.ln()) / 2.0;
        assert!((nll - expected).abs() < 1e-12);
    }

    #[test]
    fn nll_from_logits_matches_softmax_path() {
        let logits = Matrix::from_rows(&[vec![2.0, -1.0, 0.5], vec![0.0, 0.0, 3.0]]);
        let labels = vec![0, 2];
        let probs = logits.softmax_rows();
        let (_, via_probs) = accuracy_and_nll(&probs, &labels, &all(2)).unwrap();
        let direct = nll_from_logits(&logits, &labels, &all(2));
        assert!((direct - via_probs).abs() < 1e-12);

        // Large margins stay finite through the log-sum-exp path.
        let wide = Matrix::from_rows(&[vec![1000.0, 0.0]]);
        assert_eq!(nll_from_logits(&wide, &[0], &[0]), 0.0);
    }

    #[test]
    fn zero_probability_clamped_in_nll() {
        let probs = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let (_, nll) = accuracy_and_nll(&probs, &[1], &[0]).unwrap();
        assert!(nll.is_finite());
        assert!(nll > 600.0);
    }
}
