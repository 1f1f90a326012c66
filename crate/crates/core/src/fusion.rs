//! Score normalization, weighted fusion of the two branch distance vectors,
//! and the final classification rule.
//!
//! Both branch distance vectors are L2-normalized (toggleable) and combined
//! into a similarity vector, either with a fixed weight `alpha` or with a
//! learnable two-weight head that standardizes each branch first. Larger
//! similarity means more alike; classification is argmax with ties broken
//! toward the lowest class index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Manual,
    Adaptive,
}

/// How the two branch scores combine into one similarity vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Weight of the local-branch distance in `[0, 1]`; the global branch
    /// gets `1 - alpha`. Ignored in adaptive mode.
    pub alpha: f64,
    /// L2-normalize both distance vectors before weighting.
    pub normalize: bool,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            normalize: true,
            mode: FusionMode::Manual,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {} outside [0, 1]", self.alpha));
        }
        Ok(())
    }
}

/// Learnable weights and running statistics of the adaptive fusion head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveFusionParams {
    /// `[local_weight, global_weight]`.
    pub omega: [f64; 2],
    /// Per-branch running mean, `[local, global]`.
    pub running_mean: [f64; 2],
    /// Per-branch running variance, `[local, global]`; always positive.
    pub running_var: [f64; 2],
    /// Momentum of the running-statistics update.
    pub momentum: f64,
}

impl Default for AdaptiveFusionParams {
    fn default() -> Self {
        Self {
            omega: [0.5, 0.5],
            running_mean: [0.0, 0.0],
            running_var: [1.0, 1.0],
            momentum: 0.1,
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;
const VAR_FLOOR: f64 = 1e-12;

/// Scales a vector to unit L2 norm; the all-zero vector passes through.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > NORM_FLOOR {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(FusionError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Weighted additive fusion: similarity `-alpha*d_local - (1-alpha)*d_global`
/// after optional L2 normalization of each branch vector.
pub fn fuse_manual(d_local: &[f64], d_global: &[f64], config: &FusionConfig) -> Result<Vec<f64>> {
    check_lengths(d_local, d_global)?;
    let (l, g);
    let (dl, dg): (&[f64], &[f64]) = if config.normalize {
        l = l2_normalize(d_local);
        g = l2_normalize(d_global);
        (&l, &g)
    } else {
        (d_local, d_global)
    };
    let a = config.alpha;
    Ok(dl
        .iter()
        .zip(dg)
        .map(|(kl, ed)| -a * kl - (1.0 - a) * ed)
        .collect())
}

fn standardize(v: &[f64], mean: f64, var: f64) -> Vec<f64> {
    let denom = var.max(VAR_FLOOR).sqrt();
    v.iter().map(|x| (x - mean) / denom).collect()
}

fn batch_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Adaptive fusion at inference: each branch vector is standardized with the
/// stored running statistics, then weighted by the learned `omega`.
pub fn fuse_adaptive(
    d_local: &[f64],
    d_global: &[f64],
    params: &AdaptiveFusionParams,
) -> Result<Vec<f64>> {
    check_lengths(d_local, d_global)?;
    let nl = standardize(d_local, params.running_mean[0], params.running_var[0]);
    let ng = standardize(d_global, params.running_mean[1], params.running_var[1]);
    Ok(nl
        .iter()
        .zip(&ng)
        .map(|(l, g)| -params.omega[0] * l - params.omega[1] * g)
        .collect())
}

/// Adaptive fusion in training mode: standardizes with the statistics of
/// the current vectors, updates the running estimates, and returns the
/// similarity plus the standardized branch vectors (the inputs of the
/// weight gradient).
pub fn fuse_adaptive_train(
    d_local: &[f64],
    d_global: &[f64],
    params: &mut AdaptiveFusionParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_lengths(d_local, d_global)?;
    let (ml, vl) = batch_stats(d_local);
    let (mg, vg) = batch_stats(d_global);
    let nl = standardize(d_local, ml, vl);
    let ng = standardize(d_global, mg, vg);
    let m = params.momentum;
    params.running_mean[0] = (1.0 - m) * params.running_mean[0] + m * ml;
    params.running_mean[1] = (1.0 - m) * params.running_mean[1] + m * mg;
    params.running_var[0] = ((1.0 - m) * params.running_var[0] + m * vl).max(VAR_FLOOR);
    params.running_var[1] = ((1.0 - m) * params.running_var[1] + m * vg).max(VAR_FLOOR);
    let sim = nl
        .iter()
        .zip(&ng)
        .map(|(l, g)| -params.omega[0] * l - params.omega[1] * g)
        .collect();
    Ok((sim, nl, ng))
}

/// Gradient of the softmax cross-entropy loss with respect to `omega` for
/// one query, given the standardized branch vectors and the true class.
///
/// The similarity is `s_n = -w0*nl_n - w1*ng_n`; with `p = softmax(s)` and
/// loss `-ln p_y`, the chain rule gives
/// `dL/dw0 = sum_n (p_n - [n==y]) * (-nl_n)` and likewise for `w1`.
pub fn adaptive_ce_grad(nl: &[f64], ng: &[f64], omega: &[f64; 2], label: usize) -> (f64, [f64; 2]) {
    let sims: Vec<f64> = nl
        .iter()
        .zip(ng)
        .map(|(l, g)| -omega[0] * l - omega[1] * g)
        .collect();
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = -(probs[label].max(1e-300)).ln();
    let mut grad = [0.0, 0.0];
    for (n, p) in probs.iter().enumerate() {
        let ds = p - if n == label { 1.0 } else { 0.0 };
        grad[0] += ds * (-nl[n]);
        grad[1] += ds * (-ng[n]);
    }
    (loss, grad)
}

/// Argmax with ties broken toward the lowest class index.
pub fn classify(similarity: &[f64]) -> Result<usize> {
    assert!(!similarity.is_empty(), "classify needs at least one class");
    for (i, v) in similarity.iter().enumerate() {
        if !v.is_finite() {
            return Err(FusionError::NonFiniteInput(i));
        }
    }
    let mut best = 0;
    for (i, v) in similarity.iter().enumerate().skip(1) {
        if *v > similarity[best] {
            best = i;
        }
    }
    Ok(best)
}
