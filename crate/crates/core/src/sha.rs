//! Sharpness-aware hierarchical aggregation.
//!
//! Each uploaded task model is nudged along the unit direction of its last
//! student gradient, scored by the reciprocal of its summed validation
//! cross-entropy, averaged with recent better-scoring snapshots of the same
//! client, and finally combined across clients with weights `s^beta / sum s^beta`.

use serde::{Deserialize, Serialize};

use crate::bench::Sample;
use crate::error::{check_dim, Error, Result};
use crate::losses;
use crate::model::TaskNet;
use crate::params::{param_mean, param_weighted_sum, ParamVector};

/// Score returned when the summed validation loss is (numerically) zero.
pub const MAX_SCORE: f64 = 1e9;
const MIN_TOTAL_LOSS: f64 = 1e-9;
const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShaHyper {
    pub rho: f64,
    pub beta: f64,
    /// Maximum number of historical snapshots merged into the current one.
    pub k: usize,
    pub history_cap: usize,
    /// Score a client's model on its own validation set as well as its peers'.
    pub include_self: bool,
    /// Validation sets drawn per round for scoring; 0 means all.
    pub eval_clients_per_round: usize,
}

impl ShaHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.history_cap == 0 {
            return Err(Error::InvalidArgument("history_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSnapshot {
    pub params: ParamVector,
    pub score: f64,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn uniform(n: usize) -> Self {
        AggregationWeights(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub params: ParamVector,
    /// False when the gradient was too small to define a direction.
    pub perturbed: bool,
}

/// `theta + rho * g / ||g||_2`.
pub fn perturb_model(theta: &ParamVector, grad: &ParamVector, rho: f64) -> Result<Perturbed> {
    check_dim("perturb_model", theta.dim(), grad.dim())?;
    if !grad.is_finite() {
        return Err(Error::Divergence("non-finite gradient passed to perturb_model".into()));
    }
    let norm = grad.norm();
    if norm < MIN_GRAD_NORM {
        return Ok(Perturbed {
            params: theta.clone(),
            perturbed: false,
        });
    }
    let mut params = theta.clone();
    params.axpy_in_place(rho / norm, grad)?;
    Ok(Perturbed {
        params,
        perturbed: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Score {
    pub value: f64,
    pub total_loss: f64,
    pub near_perfect: bool,
}

/// Mean cross-entropy of `params` over `samples`.
pub fn mean_cls_loss(net: &TaskNet, params: &ParamVector, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let out = net.forward(params, &s.x)?;
        total += losses::loss_cls(&out.logits, s.y)?;
    }
    Ok(total / samples.len() as f64)
}

/// `1 / sum_j mean_{D_j} L_cls`, capped at [`MAX_SCORE`].
pub fn evaluate_score(net: &TaskNet, theta_hat: &ParamVector, val_sets: &[&[Sample]]) -> Result<Score> {
    if val_sets.is_empty() {
        return Err(Error::InvalidArgument("no validation sets to score against".into()));
    }
    let mut total_loss = 0.0;
    for set in val_sets {
        total_loss += mean_cls_loss(net, theta_hat, set)?;
    }
    if !total_loss.is_finite() {
        return Err(Error::Divergence("non-finite validation loss while scoring".into()));
    }
    Ok(if total_loss < MIN_TOTAL_LOSS {
        Score {
            value: MAX_SCORE,
            total_loss,
            near_perfect: true,
        }
    } else {
        Score {
            value: 1.0 / total_loss,
            total_loss,
            near_perfect: false,
        }
    })
}

/// Indices into `history` of the most recent (at most `k`) snapshots scoring
/// strictly above `threshold`. `history` is ordered by round ascending.
pub fn select_history(history: &[ScoredSnapshot], threshold: f64, k: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = history
        .iter()
        .enumerate()
        .rev()
        .filter(|(_, s)| s.score > threshold)
        .map(|(i, _)| i)
        .take(k)
        .collect();
    picked.reverse();
    picked
}

/// Averages `current` with the selected history entries (parameters and
/// scores alike). Does not modify the history.
pub fn dense_average(current: &ScoredSnapshot, history: &[ScoredSnapshot], k: usize) -> Result<ScoredSnapshot> {
    let picked = select_history(history, current.score, k);
    if picked.is_empty() {
        return Ok(current.clone());
    }
    let members: Vec<&ScoredSnapshot> = picked
        .iter()
        .map(|&i| &history[i])
        .chain(std::iter::once(current))
        .collect();
    let params = param_mean(members.iter().map(|s| &s.params))?;
    let score = members.iter().map(|s| s.score).sum::<f64>() / members.len() as f64;
    Ok(ScoredSnapshot {
        params,
        score,
        round: current.round,
    })
}

/// Appends `snapshot`, evicting the oldest entries beyond `cap`.
pub fn push_history(history: &mut Vec<ScoredSnapshot>, snapshot: ScoredSnapshot, cap: usize) {
    history.push(snapshot);
    if history.len() > cap {
        let excess = history.len() - cap;
        history.drain(..excess);
    }
}

/// Within-client dense aggregation: returns the merged snapshot and records
/// the raw (pre-merge) `current` in `history`.
pub fn within_client_aggregate(
    current: ScoredSnapshot,
    history: &mut Vec<ScoredSnapshot>,
    k: usize,
    history_cap: usize,
) -> Result<ScoredSnapshot> {
    let merged = dense_average(&current, history, k)?;
    push_history(history, current, history_cap);
    Ok(merged)
}

/// `w_i = s_i^beta / sum_j s_j^beta`, evaluated in log space.
pub fn softmax_weights(scores: &[f64], beta: f64) -> Result<AggregationWeights> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to weight".into()));
    }
    if let Some(bad) = scores.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "scores must be positive and finite, got {bad}"
        )));
    }
    let logs: Vec<f64> = scores.iter().map(|s| beta * s.ln()).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(AggregationWeights(exps.into_iter().map(|e| e / z).collect()))
}

/// Weighted sums of task models and generators with shared weights.
pub fn across_client_aggregate(
    task_models: &[&ParamVector],
    generators: &[&ParamVector],
    weights: &AggregationWeights,
) -> Result<(ParamVector, ParamVector)> {
    if task_models.len() != weights.len() || generators.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} task models, {} generators, {} weights",
            task_models.len(),
            generators.len(),
            weights.len()
        )));
    }
    Ok((
        param_weighted_sum(task_models, weights.as_slice())?,
        param_weighted_sum(generators, weights.as_slice())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, TaskArch};

    fn snap(v: f64, dim: usize, score: f64, round: usize) -> ScoredSnapshot {
        ScoredSnapshot {
            params: ParamVector::filled(dim, v),
            score,
            round,
        }
    }

    #[test]
    fn perturb_examples() {
        let theta = ParamVector::zeros(2);
        let g = ParamVector::new(vec![3.0, 4.0]);
        let p = perturb_model(&theta, &g, 0.1).unwrap();
        assert!(p.perturbed);
        assert!((p.params.as_slice()[0] - 0.06).abs() < 1e-15);
        assert!((p.params.as_slice()[1] - 0.08).abs() < 1e-15);
        let theta = ParamVector::new(vec![0.3, -0.7]);
        assert_eq!(perturb_model(&theta, &g, 0.0).unwrap().params, theta);
        let g2 = ParamVector::new(vec![6.0, 8.0]);
        assert_eq!(
            perturb_model(&theta, &g, 0.5).unwrap().params,
            perturb_model(&theta, &g2, 0.5).unwrap().params
        );
        let flat = perturb_model(&theta, &ParamVector::zeros(2), 0.5).unwrap();
        assert!(!flat.perturbed);
        assert_eq!(flat.params, theta);
        assert!(perturb_model(&theta, &ParamVector::new(vec![f64::NAN, 0.0]), 0.1).is_err());
    }

    #[test]
    fn uniform_predictor_score() {
        let arch = TaskArch {
            input_dim: 2,
            hidden_dims: vec![],
            feature_dim: 2,
            num_classes: 2,
            activation: Activation::Relu,
        };
        let net = arch.build();
        let zero = ParamVector::zeros(arch.param_count());
        let set = |d| -> Vec<Sample> {
            (0..4)
                .map(|i| Sample {
                    x: vec![0.1 * i as f64, 0.5],
                    y: i % 2,
                    domain: d,
                })
                .collect()
        };
        let (a, b) = (set(0), set(1));
        let s = evaluate_score(&net, &zero, &[&a, &b]).unwrap();
        // 1 / (2 ln 2) evaluated at 40 digits
        assert!((s.value - 0.721_347_520_444_481_7).abs() < 1e-12);
        assert!(!s.near_perfect);
        assert!(evaluate_score(&net, &zero, &[&a, &[]]).is_err());
    }

    #[test]
    fn within_client_examples() {
        let mut hist = Vec::new();
        let cur = snap(2.0, 3, 0.5, 5);
        let out = within_client_aggregate(cur.clone(), &mut hist, 4, 8).unwrap();
        assert_eq!(out, cur);
        assert_eq!(hist.len(), 1);

        let mut hist = vec![snap(0.0, 3, 0.7, 1)];
        let out = within_client_aggregate(cur.clone(), &mut hist, 4, 8).unwrap();
        assert_eq!(out.params, ParamVector::filled(3, 1.0));
        assert!((out.score - 0.6).abs() < 1e-15);
        // raw snapshot appended, not the merged one
        assert_eq!(hist.last().unwrap(), &cur);

        let mut hist = vec![snap(1.0, 1, 0.9, 1)];
        assert_eq!(within_client_aggregate(cur.clone(), &mut hist, 0, 8).unwrap(), cur);
    }

    #[test]
    fn latest_k_above_threshold_matches_subset_enumeration() {
        let hist = vec![snap(1.0, 1, 0.2, 1), snap(2.0, 1, 0.6, 2), snap(3.0, 1, 0.8, 3)];
        for k in 0..=3 {
            for threshold in [0.1, 0.5, 0.7, 0.9] {
                // Brute force: among all subsets whose members exceed the threshold,
                // take the largest one of size <= k whose minimum round is maximal.
                let mut best: Option<Vec<usize>> = None;
                for mask in 0u32..8 {
                    let set: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
                    if set.len() > k || set.iter().any(|&i| hist[i].score <= threshold) {
                        continue;
                    }
                    let key = |s: &Vec<usize>| (s.len(), s.iter().map(|&i| hist[i].round).min().unwrap_or(usize::MAX));
                    if best.as_ref().is_none_or(|b| key(&set) > key(b)) {
                        best = Some(set);
                    }
                }
                assert_eq!(
                    select_history(&hist, threshold, k),
                    best.unwrap(),
                    "k={k} t={threshold}"
                );
            }
        }
        // threshold 0.5, k = 1 -> only the round-3 entry
        assert_eq!(select_history(&hist, 0.5, 1), vec![2]);
        let out = dense_average(&snap(0.0, 1, 0.5, 4), &hist, 1).unwrap();
        assert_eq!(out.params.as_slice(), &[1.5]);
        assert!((out.score - 0.65).abs() < 1e-15);
    }

    #[test]
    fn history_evicts_oldest() {
        let mut h = Vec::new();
        for r in 0..10 {
            push_history(&mut h, snap(r as f64, 1, 1.0, r), 3);
        }
        assert_eq!(h.iter().map(|s| s.round).collect::<Vec<_>>(), vec![7, 8, 9]);
    }

    #[test]
    fn weight_examples() {
        let w = softmax_weights(&[0.7, 0.7, 0.7], 2.5).unwrap();
        assert!(w.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = softmax_weights(&[0.1, 5.0], 0.0).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
        let w = softmax_weights(&[1.0, 2.0], 1.0).unwrap();
        assert!((w.as_slice()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.as_slice()[1] - 2.0 / 3.0).abs() < 1e-15);
        // 0.5^0.3 / (0.5^0.3 + 1) at 40 digits: 0.44820048133989090883
        let w = softmax_weights(&[0.5, 1.0], 0.3).unwrap();
        assert!((w.as_slice()[0] - 0.448_200_481_339_890_9).abs() < 1e-12);
        assert!((w.as_slice()[1] - 0.551_799_518_660_109_1).abs() < 1e-12);
        assert!(softmax_weights(&[1.0, 0.0], 1.0).is_err());
        assert!(softmax_weights(&[], 1.0).is_err());
    }

    #[test]
    fn across_client_examples() {
        let a = ParamVector::new(vec![0.0, 0.0]);
        let b = ParamVector::new(vec![2.0, 4.0]);
        let w = softmax_weights(&[1.0, 3.0], 1.0).unwrap(); // (0.25, 0.75)
        let (t, g) = across_client_aggregate(&[&a, &b], &[&b, &a], &w).unwrap();
        assert_eq!(t.as_slice(), &[1.5, 3.0]);
        assert_eq!(g.as_slice(), &[0.5, 1.0]);
        let one = AggregationWeights::uniform(1);
        let (t, _) = across_client_aggregate(&[&b], &[&a], &one).unwrap();
        assert_eq!(t, b);
        assert!(across_client_aggregate(&[&a], &[&a, &b], &w).is_err());
    }
}
