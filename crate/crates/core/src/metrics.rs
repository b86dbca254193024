//! Held-out evaluation metrics and paired seed comparisons.

use serde::{Deserialize, Serialize};

use crate::bench::Sample;
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::model::TaskNet;
use crate::params::ParamVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub acc: f64,
    /// Support-weighted mean of per-class F1.
    pub f1: f64,
    /// Support-weighted mean of one-vs-rest ROC AUC; absent when fewer than
    /// two classes occur in the data.
    pub auc: Option<f64>,
    pub n: usize,
    pub support: Vec<usize>,
}

/// Mann-Whitney AUC: probability that a random positive outranks a random
/// negative, ties counting one half. `None` if either class is empty.
pub fn auc_binary(labels: &[bool], scores: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks (1-based) over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Some(u / (p * n))
}

/// Metrics from class-probability rows and labels.
pub fn evaluate_scores(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<EvalResult> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "probability rows and labels differ in length".into(),
        ));
    }
    let n = labels.len();
    let mut support = vec![0usize; num_classes];
    let mut tp = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= num_classes || p.len() != num_classes {
            return Err(Error::InvalidArgument(format!("label {y} or row width out of range")));
        }
        let pred = argmax(p);
        support[y] += 1;
        predicted[pred] += 1;
        if pred == y {
            tp[y] += 1;
            correct += 1;
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| support[c] > 0).collect();
    if present.len() < num_classes {
        log::warn!(
            "classes {:?} absent from evaluation data; excluded from weighted means",
            (0..num_classes).filter(|c| support[*c] == 0).collect::<Vec<_>>()
        );
    }
    let total: f64 = present.iter().map(|&c| support[c] as f64).sum();
    let f1 = present
        .iter()
        .map(|&c| {
            let fp = predicted[c] - tp[c];
            let fn_ = support[c] - tp[c];
            let denom = 2 * tp[c] + fp + fn_;
            let f = if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            };
            f * support[c] as f64
        })
        .sum::<f64>()
        / total;
    let auc = if present.len() < 2 {
        None
    } else {
        let mut acc = 0.0;
        for &c in &present {
            let is_c: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            acc += auc_binary(&is_c, &scores).expect("both classes present") * support[c] as f64;
        }
        Some(acc / total)
    };
    Ok(EvalResult {
        acc: correct as f64 / n as f64,
        f1,
        auc,
        n,
        support,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// Evaluates a task model on labeled samples.
pub fn evaluate<'a, I>(net: &TaskNet, params: &ParamVector, samples: I) -> Result<EvalResult>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        let out = net.forward(params, &s.x)?;
        probs.push(softmax(&out.logits));
        labels.push(s.y);
    }
    evaluate_scores(&probs, &labels, net.num_classes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    /// Mean of `a - b`.
    pub mean_diff: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Exact two-sided sign-test p-value; ties are dropped.
    pub sign_test_p: f64,
}

/// Exact two-sided binomial sign test with `p = 1/2`.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    // sum_{i<=k} C(n, i) / 2^n, built incrementally in log-free form
    let mut term = 0.5f64.powi(n as i32);
    let mut tail = term;
    for i in 1..=k {
        term *= (n - i + 1) as f64 / i as f64;
        tail += term;
    }
    (2.0 * tail).min(1.0)
}

/// Seed-aligned comparison of `a` against `b`.
pub fn paired_compare(a: &[f64], b: &[f64]) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "misaligned runs: {} vs {} entries",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "paired comparison needs at least 3 aligned runs, got {}",
            a.len()
        )));
    }
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    let mut diff = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += x - y;
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    Ok(PairedComparison {
        mean_diff: diff / a.len() as f64,
        wins,
        losses,
        ties,
        sign_test_p: sign_test(wins, losses),
    })
}
