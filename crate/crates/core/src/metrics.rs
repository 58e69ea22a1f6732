//! Evaluation metrics and the five-seed paired comparison.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argmax match rate over the given rows, restricted to the first
/// `eligible_classes` logit columns so padded dummy classes never count.
pub fn accuracy(
    logits: &Tensor,
    labels: &[usize],
    rows: &[usize],
    eligible_classes: usize,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Invalid("accuracy: empty evaluation set".into()));
    }
    let classes = eligible_classes.min(logits.cols());
    if classes == 0 {
        return Err(Error::Invalid("accuracy: no eligible classes".into()));
    }
    let mut correct = 0usize;
    for &r in rows {
        if r >= logits.rows() || r >= labels.len() {
            return Err(Error::Invalid(format!("accuracy: row {r} out of range")));
        }
        let row = logits.row(r);
        let mut best = 0usize;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == labels[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / rows.len() as f64)
}

/// Mann–Whitney ROC-AUC: the probability that a random positive outranks
/// a random negative, with ties counting one half. Computed from average
/// ranks, so no pair enumeration.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(
            "roc_auc: scores/labels length mismatch".into(),
        ));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("roc_auc: need both classes present".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("roc_auc: non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tied groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC-AUC from separate positive/negative score lists.
pub fn roc_auc_pos_neg(pos: &[f64], neg: &[f64]) -> Result<f64> {
    let mut scores = Vec::with_capacity(pos.len() + neg.len());
    let mut labels = Vec::with_capacity(pos.len() + neg.len());
    scores.extend_from_slice(pos);
    labels.extend(std::iter::repeat(true).take(pos.len()));
    scores.extend_from_slice(neg);
    labels.extend(std::iter::repeat(false).take(neg.len()));
    roc_auc(&scores, &labels)
}

/// Macro-averaged one-vs-rest ROC-AUC over logit columns; classes absent
/// from the evaluated rows are skipped.
pub fn roc_auc_one_vs_rest(
    logits: &Tensor,
    labels: &[usize],
    rows: &[usize],
    eligible_classes: usize,
) -> Result<f64> {
    let mut aucs = Vec::new();
    for c in 0..eligible_classes.min(logits.cols()) {
        let scores: Vec<f64> = rows.iter().map(|&r| logits.get(r, c)).collect();
        let lab: Vec<bool> = rows.iter().map(|&r| labels[r] == c).collect();
        if lab.iter().any(|&l| l) && lab.iter().any(|&l| !l) {
            aucs.push(roc_auc(&scores, &lab)?);
        }
    }
    if aucs.is_empty() {
        return Err(Error::Invalid(
            "roc_auc_one_vs_rest: no class has both outcomes".into(),
        ));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Fraction of positives scored strictly above the k-th highest negative.
pub fn hits_at_k(pos_scores: &[f64], neg_scores: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("hits_at_k: k must be positive".into()));
    }
    if neg_scores.len() < k {
        return Err(Error::Invalid(format!(
            "hits_at_k: need at least {k} negative scores, got {}",
            neg_scores.len()
        )));
    }
    if pos_scores.is_empty() {
        return Err(Error::Invalid("hits_at_k: no positive scores".into()));
    }
    let mut sorted = neg_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = sorted[k - 1];
    let hits = pos_scores.iter().filter(|&&s| s > threshold).count();
    Ok(hits as f64 / pos_scores.len() as f64)
}

/// Mean and sample standard deviation (n − 1 denominator; 0 when n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    FirstWins,
    SecondWins,
    Tie,
}

#[derive(Debug, Clone, Copy)]
pub struct PairedOutcome {
    /// t statistic; `None` when the differences have zero variance.
    pub t: Option<f64>,
    pub p: f64,
    pub mean_diff: f64,
    pub verdict: Verdict,
}

/// Two-sided paired t-test on per-seed metric pairs. A winner is declared
/// only at p < 0.05. Zero-variance differences have no t statistic: by
/// convention they are significant when the mean differs from zero and a
/// tie (p = 1) otherwise.
pub fn paired_t_test(first: &[f64], second: &[f64]) -> Result<PairedOutcome> {
    if first.len() != second.len() {
        return Err(Error::Invalid("paired_t_test: length mismatch".into()));
    }
    if first.len() < 2 {
        return Err(Error::Invalid(
            "paired_t_test: need at least 2 paired values".into(),
        ));
    }
    let diffs: Vec<f64> = first.iter().zip(second).map(|(a, b)| a - b).collect();
    let (mean, sd) = mean_std(&diffs);
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            PairedOutcome {
                t: None,
                p: 1.0,
                mean_diff: mean,
                verdict: Verdict::Tie,
            }
        } else {
            PairedOutcome {
                t: None,
                p: 0.0,
                mean_diff: mean,
                verdict: if mean > 0.0 {
                    Verdict::FirstWins
                } else {
                    Verdict::SecondWins
                },
            }
        });
    }
    let n = diffs.len() as f64;
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::Invalid(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    let verdict = if p < 0.05 {
        if mean > 0.0 {
            Verdict::FirstWins
        } else {
            Verdict::SecondWins
        }
    } else {
        Verdict::Tie
    };
    Ok(PairedOutcome {
        t: Some(t),
        p,
        mean_diff: mean,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_examples() {
        let logits = Tensor::matrix(4, 2, vec![2.0, 1.0, 0.0, 3.0, 5.0, -1.0, 0.5, 0.4]).unwrap();
        let labels = vec![0, 1, 0, 1];
        let rows: Vec<usize> = (0..4).collect();
        // Rows 0..2 correct, row 3 predicted 0 but labeled 1 → 3/4.
        assert_eq!(accuracy(&logits, &labels, &rows, 2).unwrap(), 0.75);

        let all_right = vec![0, 1, 0, 0];
        assert_eq!(accuracy(&logits, &all_right, &rows, 2).unwrap(), 1.0);

        assert!(accuracy(&logits, &labels, &[], 2).is_err());
    }

    #[test]
    fn accuracy_near_chance_for_coin_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2000;
        let data: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = Tensor::matrix(n, 2, data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let rows: Vec<usize> = (0..n).collect();
        let acc = accuracy(&logits, &labels, &rows, 2).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "chance accuracy was {acc}");
    }

    #[test]
    fn accuracy_ignores_dummy_class_columns() {
        // Dummy column 2 has the largest logit but is not eligible.
        let logits = Tensor::matrix(1, 3, vec![1.0, 0.0, 99.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0], &[0], 2).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_invariant_under_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = Tensor::matrix(10, 3, data.clone()).unwrap();
        let shifted = Tensor::matrix(10, 3, data.iter().map(|v| v + 7.5).collect()).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let rows: Vec<usize> = (0..10).collect();
        assert_eq!(
            accuracy(&logits, &labels, &rows, 3).unwrap(),
            accuracy(&shifted, &labels, &rows, 3).unwrap()
        );
    }

    #[test]
    fn roc_auc_examples() {
        // Perfect separation.
        assert_eq!(roc_auc_pos_neg(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        // All ties.
        assert_eq!(roc_auc_pos_neg(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
        // One win, one loss out of 2 pos × 1 neg pairs.
        let auc = roc_auc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap();
        assert_eq!(auc, 0.5);
        // Single class is an error.
        assert!(roc_auc(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn hits_at_k_examples() {
        assert_eq!(hits_at_k(&[0.9, 0.8], &[0.2, 0.1], 1).unwrap(), 1.0);
        assert_eq!(hits_at_k(&[0.1], &[0.9, 0.8], 1).unwrap(), 0.0);
        // Threshold is the 2nd-highest negative (0.5); only 0.9 beats it.
        assert_eq!(hits_at_k(&[0.9, 0.4], &[0.8, 0.5, 0.1], 2).unwrap(), 0.5);
        assert!(hits_at_k(&[0.9], &[0.5], 2).is_err());
    }

    #[test]
    fn paired_t_examples() {
        // Identical vectors: zero-variance zero-mean → tie with p = 1.
        let out = paired_t_test(&[0.8, 0.7, 0.9], &[0.8, 0.7, 0.9]).unwrap();
        assert_eq!(out.verdict, Verdict::Tie);
        assert_eq!(out.p, 1.0);

        // Constant positive shift: declared significant by convention.
        let a = [1.0, 1.0, 1.0, 1.0, 1.0];
        let b = [0.0, 0.0, 0.0, 0.0, 0.0];
        let out = paired_t_test(&a, &b).unwrap();
        assert_eq!(out.verdict, Verdict::FirstWins);
        assert_eq!(out.p, 0.0);

        // Hand computation: diffs [2,−1,3,0,1], mean 1, sd √(10/4),
        // t = 1/(sd/√5) = √2.
        let a = [2.0, -1.0, 3.0, 0.0, 1.0];
        let b = [0.0; 5];
        let out = paired_t_test(&a, &b).unwrap();
        let t = out.t.unwrap();
        assert!((t - std::f64::consts::SQRT_2).abs() < 1e-12, "t = {t}");
        assert!(out.p > 0.05);
        assert_eq!(out.verdict, Verdict::Tie);

        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn mean_std_matches_hand_calculation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-12);
        let (_, s1) = mean_std(&[7.0]);
        assert_eq!(s1, 0.0);
    }
}
