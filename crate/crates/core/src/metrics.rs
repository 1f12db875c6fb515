//! Ranking helpers and evaluation metrics.
//!
//! All orderings break ties by ascending original index.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Indices sorted by descending score, ties by ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Indices sorted by ascending score, ties by ascending index.
pub fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// `rank[i]` = position of item `i` in the descending order (0 = highest).
pub fn descending_ranks(scores: &[f64]) -> Vec<usize> {
    let mut rank = vec![0; scores.len()];
    for (pos, i) in descending_order(scores).into_iter().enumerate() {
        rank[i] = pos;
    }
    rank
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let order = ascending_order(values);
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            op: "spearman",
            expected: format!("{} values", x.len()),
            actual: format!("{} values", y.len()),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("spearman", "needs at least two values"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::invalid("spearman", "constant input has undefined correlation"))
}

/// Area under the ROC curve for `scores` predicting `positive`, via the
/// Mann-Whitney statistic: each (positive, negative) pair counts 1 when the
/// positive scores higher and 1/2 on a tie.
pub fn auc_roc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch {
            op: "auc_roc",
            expected: format!("{} labels", scores.len()),
            actual: format!("{} labels", positive.len()),
        });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "noisy_mask",
            format!("AUC needs both classes, got {n_pos} positive and {n_neg} negative"),
        ));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard error of the mean (sample standard deviation over sqrt(n)); 0 for n < 2.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mu = mean(values);
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn orders_break_ties_by_index() {
        assert_eq!(descending_order(&[1.0, 3.0, 3.0, 0.0]), vec![1, 2, 0, 3]);
        assert_eq!(ascending_order(&[1.0, 0.0, 0.0]), vec![1, 2, 0]);
        assert_eq!(descending_ranks(&[5.0, 1.0, 3.0]), vec![0, 2, 1]);
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn auc_edge_cases() {
        let mask = [true, false, true, false];
        assert_eq!(auc_roc(&[4.0, 1.0, 3.0, 2.0], &mask).unwrap(), 1.0);
        assert_eq!(auc_roc(&[1.0, 4.0, 2.0, 3.0], &mask).unwrap(), 0.0);
        assert_eq!(auc_roc(&[1.0; 4], &mask).unwrap(), 0.5);
        assert!(auc_roc(&[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn auc_matches_pair_enumeration() {
        let scores = [0.3, 0.1, 0.3, 0.9, 0.5, 0.1, 0.7];
        let mask = [true, false, false, true, false, true, false];
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if mask[i] && !mask[j] {
                    pairs += 1.0;
                    credit += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        assert!((auc_roc(&scores, &mask).unwrap() - credit / pairs).abs() < 1e-15);
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // classic formula 1 - 6Σd²/(n(n²-1)) without ties: d = [0, 1, -1, 0]
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rho - (1.0 - 6.0 * 2.0 / 60.0)).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn summary_stats() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(standard_error(&[1.0]), 0.0);
        let se = standard_error(&[1.0, 2.0, 3.0, 4.0]);
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_positive_rescaling(
            scores in prop::collection::vec(-100.0f64..100.0, 4..30),
            scale in 0.01f64..100.0,
            seed in any::<u64>(),
        ) {
            let mask: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
            prop_assume!(mask.iter().any(|&m| !m));
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            prop_assert_eq!(descending_order(&scores), descending_order(&scaled));
            let a = auc_roc(&scores, &mask).unwrap();
            let b = auc_roc(&scaled, &mask).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
