//! Membership-inference metrics over game outcomes.

use std::cmp::Ordering;

use crate::error::{AmiError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub advantage: f64,
}

/// A labelled prediction: hidden bit, guessed bit and continuous score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Labeled {
    pub b: u8,
    pub b_prime: u8,
    pub score: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// ACC, F1 (members are the positive class), rank AUC, TPR, TNR and `TPR + TNR - 1`.
/// Rates without any example of their class are NaN.
pub fn compute_metrics(items: &[Labeled]) -> Metrics {
    let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for it in items {
        match (it.b, it.b_prime) {
            (1, 1) => tp += 1,
            (1, _) => fneg += 1,
            (_, 1) => fp += 1,
            _ => tn += 1,
        }
        if it.b == 1 {
            pos.push(it.score);
        } else {
            neg.push(it.score);
        }
    }
    let tpr = ratio(tp, tp + fneg);
    let tnr = ratio(tn, tn + fp);
    let f1 = if 2 * tp + fp + fneg == 0 { f64::NAN } else { ratio(2 * tp, 2 * tp + fp + fneg) };
    let auc = auc_rank(&pos, &neg);
    if auc.is_nan() && !items.is_empty() {
        log::warn!("AUC undefined: all {} trials share one class", items.len());
    }
    Metrics {
        acc: ratio(tp + tn, items.len()),
        f1,
        auc,
        tpr,
        tnr,
        advantage: tpr + tnr - 1.0,
    }
}

/// Mann-Whitney AUC with average ranks for ties; NaN when a class is empty.
pub fn auc_rank(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Pairwise AUC, `mean [p > n] + 0.5 [p = n]`.
pub fn auc_bruteforce(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(AmiError::Contract("AUC needs both classes".into()));
    }
    let mut total = 0.0;
    for &p in pos {
        for &n in neg {
            total += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (pos.len() * neg.len()) as f64)
}
