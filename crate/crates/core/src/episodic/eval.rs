//! Task-level evaluation with confidence intervals.
//!
//! Each task draws its episode from an RNG derived from `(seed, task
//! index)`, so results are independent of worker scheduling and a run over
//! `tasks` is exactly the concatenation of single-task runs.

use super::data::Dataset;
use super::sampler::{sample_episode, Episode};
use super::EpisodicError;
use crate::encoder::{encode, EncoderParams};
use crate::fusion::{
    classify, fuse_adaptive, fuse_manual, AdaptiveFusionParams, FusionConfig, FusionMode,
};
use crate::metrics::{
    class_distance_vector, prototype_global, ClassSummaries, GaussianStats, MetricKind,
};
use crate::numerics::{fit_gaussian, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Settings of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub n_way: usize,
    pub k_shot: usize,
    pub t_query: usize,
    pub tasks: usize,
    pub seed: u64,
    pub global_kind: MetricKind,
    pub local_kind: MetricKind,
    pub fusion: FusionConfig,
    /// Required when `fusion.mode` is adaptive; statistics are frozen.
    pub adaptive: Option<AdaptiveFusionParams>,
    pub epsilon_scale: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            t_query: 15,
            tasks: 200,
            seed: 0,
            global_kind: MetricKind::Sqr,
            local_kind: MetricKind::Kl,
            fusion: FusionConfig::default(),
            adaptive: None,
            epsilon_scale: 1e-2,
        }
    }
}

/// Per-task accuracies plus their mean and 95% confidence interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    pub ci95: f64,
    pub task_accuracies: Vec<f64>,
}

impl EvalReport {
    /// CSV rows `task_id,n_way,k_shot,accuracy` with a header line.
    pub fn to_csv(&self, n_way: usize, k_shot: usize) -> String {
        let mut out = String::from("task_id,n_way,k_shot,accuracy\n");
        for (i, acc) in self.task_accuracies.iter().enumerate() {
            out.push_str(&format!("{i},{n_way},{k_shot},{acc}\n"));
        }
        out
    }
}

/// Builds a report from raw per-task accuracies:
/// `ci95 = 1.96 * std / sqrt(n)` with the n-1 sample deviation.
pub fn report_from_accuracies(task_accuracies: Vec<f64>) -> EvalReport {
    let n = task_accuracies.len();
    let mean = if n == 0 {
        0.0
    } else {
        task_accuracies.iter().sum::<f64>() / n as f64
    };
    let ci95 = if n < 2 {
        0.0
    } else {
        let var = task_accuracies
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    };
    EvalReport {
        mean,
        ci95,
        task_accuracies,
    }
}

/// RNG for one evaluation task, independent of every other task.
pub fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64 + 1);
    rng
}

/// The per-query branch distances of one scored episode.
pub struct QueryDistances {
    pub d_local: Vec<f64>,
    pub d_global: Vec<f64>,
    pub truth: usize,
}

/// Encodes an episode with both branches and computes, for every query, the
/// local and global per-class distance vectors.
///
/// Either side can be skipped (`None` kind) when a caller only consumes one
/// branch; skipped distances are all-zero vectors.
pub fn episode_distances(
    global_params: &EncoderParams,
    local_params: &EncoderParams,
    dataset: &Dataset,
    episode: &Episode,
    global_kind: Option<MetricKind>,
    local_kind: Option<MetricKind>,
    epsilon_scale: f64,
) -> Result<Vec<QueryDistances>, EpisodicError> {
    let n = episode.n_way();
    let k = episode.support.len() / n;

    // Global branch summaries.
    let prototypes: Option<ClassSummaries> = if global_kind.is_some() {
        let mut protos = Vec::with_capacity(n);
        for class in 0..n {
            let embs: Vec<Vector> = episode.support[class * k..(class + 1) * k]
                .iter()
                .map(|item| encode(global_params, dataset.image(item.image)).map(|(e, _)| e.global))
                .collect::<Result<_, _>>()?;
            protos.push(prototype_global(&embs)?);
        }
        Some(ClassSummaries::Prototypes(protos))
    } else {
        None
    };

    // Local branch summaries: pool all K*M support locals per class.
    let gaussians: Option<ClassSummaries> = if local_kind.is_some() {
        let mut stats: Vec<GaussianStats> = Vec::with_capacity(n);
        for class in 0..n {
            let mut pooled: Vec<Vector> = Vec::new();
            for item in &episode.support[class * k..(class + 1) * k] {
                let (emb, _) = encode(local_params, dataset.image(item.image))?;
                pooled.extend(emb.local);
            }
            stats.push(fit_gaussian(&pooled, epsilon_scale)?);
        }
        Some(ClassSummaries::Gaussians(stats))
    } else {
        None
    };

    let mut out = Vec::with_capacity(episode.query.len());
    for item in &episode.query {
        let d_global = match (global_kind, &prototypes) {
            (Some(kind), Some(summaries)) => {
                let (emb, _) = encode(global_params, dataset.image(item.image))?;
                class_distance_vector(kind, &emb, summaries, epsilon_scale)?
            }
            _ => vec![0.0; n],
        };
        let d_local = match (local_kind, &gaussians) {
            (Some(kind), Some(summaries)) => {
                let (emb, _) = encode(local_params, dataset.image(item.image))?;
                class_distance_vector(kind, &emb, summaries, epsilon_scale)?
            }
            _ => vec![0.0; n],
        };
        out.push(QueryDistances {
            d_local,
            d_global,
            truth: item.class,
        });
    }
    Ok(out)
}

fn fuse_and_classify(qd: &QueryDistances, opts: &EvalOptions) -> Result<usize, EpisodicError> {
    let sim = match opts.fusion.mode {
        FusionMode::Manual => fuse_manual(&qd.d_local, &qd.d_global, &opts.fusion)?,
        FusionMode::Adaptive => {
            let params = opts.adaptive.clone().unwrap_or_default();
            fuse_adaptive(&qd.d_local, &qd.d_global, &params)?
        }
    };
    Ok(classify(&sim)?)
}

/// Fused accuracy of both branches on one fixed episode.
pub fn episode_fused_accuracy(
    global_params: &EncoderParams,
    local_params: &EncoderParams,
    dataset: &Dataset,
    episode: &Episode,
    opts: &EvalOptions,
) -> Result<f64, EpisodicError> {
    let skip_global = opts.fusion.mode == FusionMode::Manual && opts.fusion.alpha == 1.0;
    let skip_local = opts.fusion.mode == FusionMode::Manual && opts.fusion.alpha == 0.0;
    let distances = episode_distances(
        global_params,
        local_params,
        dataset,
        episode,
        (!skip_global).then_some(opts.global_kind),
        (!skip_local).then_some(opts.local_kind),
        opts.epsilon_scale,
    )?;
    let mut correct = 0usize;
    for qd in &distances {
        if fuse_and_classify(qd, opts)? == qd.truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / distances.len() as f64)
}

/// Runs `opts.tasks` episodes scored by `scorer` (one accuracy per task).
///
/// The scorer receives the dataset and the sampled episode and returns one
/// similarity vector per query, in query order.
pub fn evaluate_with_scorer<F>(
    dataset: &Dataset,
    opts: &EvalOptions,
    scorer: F,
) -> Result<EvalReport, EpisodicError>
where
    F: Fn(&Dataset, &Episode) -> Result<Vec<Vec<f64>>, EpisodicError> + Sync,
{
    let accuracies: Vec<f64> = (0..opts.tasks)
        .into_par_iter()
        .map(|task| -> Result<f64, EpisodicError> {
            let mut rng = task_rng(opts.seed, task);
            let episode = sample_episode(dataset, opts.n_way, opts.k_shot, opts.t_query, &mut rng)?;
            let sims = scorer(dataset, &episode)?;
            let mut correct = 0usize;
            for (sim, item) in sims.iter().zip(&episode.query) {
                if classify(sim)? == item.class {
                    correct += 1;
                }
            }
            Ok(correct as f64 / episode.query.len() as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(report_from_accuracies(accuracies))
}

/// Full evaluation: encode, summarize, measure with both configured metric
/// kinds, fuse, classify, and aggregate per-task accuracies.
pub fn evaluate(
    global_params: &EncoderParams,
    local_params: &EncoderParams,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport, EpisodicError> {
    let skip_global = opts.fusion.mode == FusionMode::Manual && opts.fusion.alpha == 1.0;
    let skip_local = opts.fusion.mode == FusionMode::Manual && opts.fusion.alpha == 0.0;
    evaluate_with_scorer(dataset, opts, |ds, episode| {
        let distances = episode_distances(
            global_params,
            local_params,
            ds,
            episode,
            (!skip_global).then_some(opts.global_kind),
            (!skip_local).then_some(opts.local_kind),
            opts.epsilon_scale,
        )?;
        distances
            .iter()
            .map(|qd| {
                Ok(match opts.fusion.mode {
                    FusionMode::Manual => fuse_manual(&qd.d_local, &qd.d_global, &opts.fusion)?,
                    FusionMode::Adaptive => {
                        let params = opts.adaptive.clone().unwrap_or_default();
                        fuse_adaptive(&qd.d_local, &qd.d_global, &params)?
                    }
                })
            })
            .collect()
    })
}
