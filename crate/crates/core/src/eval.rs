//! Detection metrics (AUC-ROC, best F1) and coverage of injected windows.

use crate::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN anomaly score".into()));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive scores above a random negative, ties counting
/// one half. Computed from mid-ranks in `O(T log T)`.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (doubled) mid-ranks of the positives; doubling keeps it integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2
        let doubled_mid = (i + j + 2) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled_mid * tied_pos;
        i = j + 1;
    }
    let p = positives as u128;
    // U = R_pos - P(P+1)/2; doubled to stay in integers
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Best F1 over every threshold of the form "score >= t" with `t` ranging
/// over the distinct observed scores. Returns `(f1, t)`; on ties the
/// smallest threshold wins.
pub fn best_f1(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "best F1 needs at least one positive label".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Threshold above every score predicts nothing: F1 = 0.
    let mut best = (0.0, f64::INFINITY);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = f1_from_counts(tp, fp, positives - tp);
        // descending sweep: >= moves the optimum to the smaller threshold
        if f1 >= best.0 {
            best = (f1, t);
        }
    }
    Ok(best)
}

/// `2TP / (2TP + FP + FN)`, or 0 when nothing is predicted positive.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let tp2 = 2.0 * tp as f64;
    tp2 / (tp2 + fp as f64 + fn_ as f64)
}

/// F1 of the rule "score >= threshold".
pub fn f1_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Fraction of injected indices that ended up discarded; `None` when
/// nothing was injected. Both inputs may be in any order.
pub fn coverage(injected: &[usize], discarded: &[usize]) -> Option<f64> {
    if injected.is_empty() {
        return None;
    }
    let discarded: std::collections::HashSet<usize> = discarded.iter().copied().collect();
    let mut seen = std::collections::HashSet::new();
    let mut hit = 0usize;
    for &i in injected {
        if seen.insert(i) && discarded.contains(&i) {
            hit += 1;
        }
    }
    Some(hit as f64 / seen.len() as f64)
}
