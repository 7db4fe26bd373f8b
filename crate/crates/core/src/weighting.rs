//! Turning influence scores into instance weights and selections.
//!
//! Influence is positive when upweighting an instance increases the matching
//! objective, so policies rank instances by benefit, the negated influence.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ad::Mat;
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightPolicy {
    Uniform,
    Softmax { tau: f64 },
    TopK { k: usize },
    Prune { keep_frac: f64 },
}

impl WeightPolicy {
    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            WeightPolicy::Uniform => Ok(()),
            WeightPolicy::Softmax { tau } => check_tau(tau),
            WeightPolicy::TopK { k } => check_k(k, n),
            WeightPolicy::Prune { keep_frac } => check_keep(keep_frac),
        }
    }

    /// Whether the policy consumes influence scores at all.
    pub fn needs_scores(&self) -> bool {
        !matches!(self, WeightPolicy::Uniform)
    }

    /// Weights over the whole dataset, summing to one.
    pub fn weights(&self, influence: &[f64]) -> Result<Vec<f64>> {
        let n = influence.len();
        if n == 0 {
            return Err(Error::contract("no scores to weight"));
        }
        self.validate(n)?;
        let uniform_over = |idx: &[usize]| {
            let mut w = vec![0.0; n];
            for &i in idx {
                w[i] = 1.0 / idx.len() as f64;
            }
            w
        };
        let b = benefit(influence);
        match *self {
            WeightPolicy::Uniform => Ok(vec![1.0 / n as f64; n]),
            WeightPolicy::Softmax { tau } => softmax_weights(&standardize(&b), tau),
            WeightPolicy::TopK { k } => Ok(uniform_over(&select_top_k(&b, k)?)),
            WeightPolicy::Prune { keep_frac } => Ok(uniform_over(&prune_fraction(&b, keep_frac)?)),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::contract("softmax temperature must be positive and finite"));
    }
    Ok(())
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::contract(alloc::format!("top-k needs 1 <= k <= {n}, got {k}")));
    }
    Ok(())
}

fn check_keep(keep: f64) -> Result<()> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::contract("keep fraction must lie in (0, 1]"));
    }
    Ok(())
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if !math::all_finite(scores) {
        return Err(Error::contract("scores must be finite"));
    }
    Ok(())
}

pub fn benefit(influence: &[f64]) -> Vec<f64> {
    influence.iter().map(|v| -v).collect()
}

/// Zero mean, unit population variance; a constant vector maps to zeros.
pub fn standardize(scores: &[f64]) -> Vec<f64> {
    let m = math::mean(scores);
    let sd = math::std_dev(scores);
    if !(sd > 0.0) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|v| (v - m) / sd).collect()
}

pub fn softmax_weights(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    check_finite(scores)?;
    if scores.is_empty() {
        return Err(Error::contract("softmax of an empty score vector"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| math::exp((s - max) / tau)).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Indices ordered by descending score, ties by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// The `k` highest-scoring indices, returned in ascending index order.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, scores.len())?;
    check_finite(scores)?;
    let mut top: Vec<usize> = ranked(scores).into_iter().take(k).collect();
    top.sort_unstable();
    Ok(top)
}

/// The top `⌈keep_frac·N⌉` indices by score.
pub fn prune_fraction(scores: &[f64], keep_frac: f64) -> Result<Vec<usize>> {
    check_keep(keep_frac)?;
    let n = scores.len();
    // tolerance absorbs representation error such as 0.9 * 100
    let k = (math::ceil(keep_frac * n as f64 - 1e-9) as usize).clamp(1, n.max(1));
    select_top_k(scores, k)
}

/// Greedy herding per class: each step adds the instance that brings the
/// running mean of the selection closest to the class mean. Returns the picks
/// of each class in selection order.
pub fn herding_select(features: &Mat, labels: &[usize], classes: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if features.rows != labels.len() {
        return Err(Error::contract("features and labels disagree in length"));
    }
    let d = features.cols;
    let row = |i: usize| &features.data[i * d..(i + 1) * d];
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if k > members.len() {
            return Err(Error::contract(alloc::format!(
                "class {c} has {} instances, {k} requested",
                members.len()
            )));
        }
        let mut target = vec![0.0; d];
        for &i in &members {
            math::axpy(1.0 / members.len() as f64, row(i), &mut target);
        }
        let mut sum = vec![0.0; d];
        let mut taken = vec![false; members.len()];
        let mut picks = Vec::with_capacity(k);
        for m in 0..k {
            let mut best: Option<(usize, f64)> = None;
            for (pos, &i) in members.iter().enumerate() {
                if taken[pos] {
                    continue;
                }
                let dist: f64 = (0..d)
                    .map(|q| {
                        let v = (sum[q] + row(i)[q]) / (m + 1) as f64 - target[q];
                        v * v
                    })
                    .sum();
                if best.is_none_or(|(_, bd)| dist < bd) {
                    best = Some((pos, dist));
                }
            }
            let (pos, _) = best.expect("a candidate remains");
            taken[pos] = true;
            math::axpy(1.0, row(members[pos]), &mut sum);
            picks.push(members[pos]);
        }
        out.push(picks);
    }
    Ok(out)
}

/// Global weights restricted to a minibatch and rescaled by `N / n`, so the
/// expected weighted batch loss equals the weighted full loss.
pub fn batch_weights(global: &[f64], batch: &[usize]) -> Vec<f64> {
    let scale = global.len() as f64 / batch.len() as f64;
    batch.iter().map(|&i| global[i] * scale).collect()
}
