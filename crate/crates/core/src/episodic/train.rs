//! Dual-branch episodic meta-training with independent losses.
//!
//! Each branch owns an encoder: the global branch scores queries by squared
//! Euclidean distance to class prototypes, the local branch by Gaussian KL
//! divergence between pooled patch distributions. Both minimize a softmax
//! cross-entropy over negated distances with decoupled-weight-decay Adam
//! steps on a cosine learning-rate schedule. Validation accuracy of the
//! fused scores picks the snapshots that are returned.

use super::data::Dataset;
use super::eval::{episode_distances, episode_fused_accuracy, EvalOptions};
use super::sampler::{sample_episode, Episode};
use super::tensorfile::{
    atomic_write, load_tensor_map, save_tensor_map, TensorData, TensorMap, TensorPayload,
};
use super::{DataError, EpisodicError};
use crate::autodiff::{NodeId, Tape};
use crate::encoder::{
    forward, init_params, stage_params, EncoderConfig, EncoderParams, TapedEmbedding,
};
use crate::fusion::{adaptive_ce_grad, fuse_adaptive_train, AdaptiveFusionParams, FusionConfig};
use crate::metrics::{taped_euclidean_sq, taped_fit_gaussian, MetricKind};
use crate::numerics::NumericsError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Decoupled-weight-decay Adam settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Everything one training-plus-evaluation run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub t_query: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Fixed validation episodes scored at every epoch end.
    pub val_episodes: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub seed: u64,
    pub epsilon_scale: f64,
    /// Train one shared encoder for both branches (ablation).
    pub share_params: bool,
    pub adam: AdamConfig,
    pub fusion: FusionConfig,
    pub encoder: EncoderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            t_query: 5,
            epochs: 30,
            episodes_per_epoch: 50,
            val_episodes: 20,
            lr_init: 1e-5,
            lr_final: 1e-6,
            seed: 0,
            epsilon_scale: 1e-2,
            share_params: false,
            adam: AdamConfig::default(),
            fusion: FusionConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EpisodicError> {
        if self.n_way < 2 || self.k_shot == 0 || self.t_query == 0 {
            return Err(EpisodicError::InvalidConfig(format!(
                "need n_way >= 2, k_shot >= 1, t_query >= 1 (got {}/{}/{})",
                self.n_way, self.k_shot, self.t_query
            )));
        }
        if self.epsilon_scale <= 0.0 {
            return Err(EpisodicError::InvalidConfig(
                "epsilon_scale must be positive".into(),
            ));
        }
        if self.lr_init <= 0.0 || self.lr_final <= 0.0 {
            return Err(EpisodicError::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        self.fusion
            .validate()
            .map_err(EpisodicError::InvalidConfig)?;
        self.encoder
            .validate()
            .map_err(|e| EpisodicError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_way: self.n_way,
            k_shot: self.k_shot,
            t_query: self.t_query,
            seed: self.seed,
            fusion: self.fusion.clone(),
            epsilon_scale: self.epsilon_scale,
            ..EvalOptions::default()
        }
    }
}

/// Softmax over negated distances, computed with max subtraction.
pub fn branch_probabilities(distances: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = distances.iter().map(|d| -d).collect();
    let max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Probability floor applied before the log in [`branch_loss`].
pub const PROBABILITY_CLAMP: f64 = 1e-30;

/// Mean negative log-probability of the true class over all queries.
///
/// True-class probabilities below [`PROBABILITY_CLAMP`] are clamped; the
/// second return value counts how many were, so callers can warn.
pub fn branch_loss(probabilities: &[Vec<f64>], labels: &[usize]) -> (f64, usize) {
    assert_eq!(probabilities.len(), labels.len());
    assert!(!probabilities.is_empty());
    let mut acc = 0.0;
    let mut clamped = 0usize;
    for (row, &label) in probabilities.iter().zip(labels) {
        let p = row[label];
        let p = if p < PROBABILITY_CLAMP {
            clamped += 1;
            PROBABILITY_CLAMP
        } else {
            p
        };
        acc -= p.ln();
    }
    (acc / probabilities.len() as f64, clamped)
}

/// Cosine schedule from `lr_init` (step 0) to `lr_final` (last step).
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total_steps <= 1 {
        return lr_init;
    }
    let t = step as f64 / (total_steps - 1) as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Cross-entropy over negated distance nodes for all queries of an episode.
///
/// `dists[i]` holds the per-class 1x1 distance nodes of query `i`.
fn taped_episode_ce(tape: &mut Tape, dists: Vec<Vec<NodeId>>, labels: &[usize]) -> NodeId {
    let mut picks = Vec::with_capacity(labels.len());
    for (row, &label) in dists.into_iter().zip(labels) {
        let negs: Vec<NodeId> = row.into_iter().map(|d| tape.scale(d, -1.0)).collect();
        let logits = tape.concat_cols(&negs);
        let logp = tape.row_log_softmax(logits);
        picks.push(tape.slice_cols(logp, label, 1));
    }
    let total = tape.add_n(&picks);
    tape.scale(total, -1.0 / picks.len() as f64)
}

/// Builds the global-branch episode loss from taped embeddings
/// (class-major support order, as produced by the sampler).
pub fn build_global_loss(
    tape: &mut Tape,
    support: &[TapedEmbedding],
    query: &[TapedEmbedding],
    n_way: usize,
    labels: &[usize],
) -> NodeId {
    let k = support.len() / n_way;
    let prototypes: Vec<NodeId> = (0..n_way)
        .map(|class| {
            let globals: Vec<NodeId> = support[class * k..(class + 1) * k]
                .iter()
                .map(|e| e.global)
                .collect();
            if k == 1 {
                globals[0]
            } else {
                let stacked = tape.concat_rows(&globals);
                tape.mean_rows(stacked)
            }
        })
        .collect();
    let dists: Vec<Vec<NodeId>> = query
        .iter()
        .map(|q| {
            prototypes
                .iter()
                .map(|&p| taped_euclidean_sq(tape, q.global, p))
                .collect()
        })
        .collect();
    taped_episode_ce(tape, dists, labels)
}

/// Builds the local-branch episode loss: pooled per-class Gaussians, a
/// per-query Gaussian, and KL divergences feeding the cross-entropy.
///
/// Log-determinants are hoisted per distribution and both solve right-hand
/// sides share one factorization; the result is numerically identical to
/// composing [`crate::metrics::taped_kl_gaussian`] per pair.
pub fn build_local_loss(
    tape: &mut Tape,
    support: &[TapedEmbedding],
    query: &[TapedEmbedding],
    n_way: usize,
    labels: &[usize],
    epsilon_scale: f64,
) -> Result<NodeId, NumericsError> {
    let k = support.len() / n_way;
    let c = tape.value(support[0].locals).cols();
    let mut class_stats = Vec::with_capacity(n_way);
    for class in 0..n_way {
        let pooled: Vec<NodeId> = support[class * k..(class + 1) * k]
            .iter()
            .map(|e| e.locals)
            .collect();
        let stacked = if pooled.len() == 1 {
            pooled[0]
        } else {
            tape.concat_rows(&pooled)
        };
        let (mu, sigma) = taped_fit_gaussian(tape, stacked, epsilon_scale);
        let logdet = tape.log_det_spd(sigma)?;
        class_stats.push((mu, sigma, logdet));
    }
    let mut dists = Vec::with_capacity(query.len());
    for q in query {
        let (mu_q, sigma_q) = taped_fit_gaussian(tape, q.locals, epsilon_scale);
        let ld_q = tape.log_det_spd(sigma_q)?;
        let mut row = Vec::with_capacity(n_way);
        for &(mu_s, sigma_s, ld_s) in &class_stats {
            let d = tape.sub(mu_s, mu_q);
            let dt = tape.transpose(d);
            let rhs = tape.concat_cols(&[sigma_q, dt]);
            let solved = tape.spd_solve(sigma_s, rhs)?;
            let left = tape.slice_cols(solved, 0, c);
            let t_trace = tape.trace(left);
            let y = tape.slice_cols(solved, c, 1);
            let t_mahal = tape.matmul(d, y);
            let t_logdet = tape.sub(ld_s, ld_q);
            let sum = tape.add_n(&[t_trace, t_logdet, t_mahal]);
            let sum = tape.add_const(sum, -(c as f64));
            row.push(tape.scale(sum, 0.5));
        }
        dists.push(row);
    }
    Ok(taped_episode_ce(tape, dists, labels))
}

struct AdamState {
    m: EncoderParams,
    v: EncoderParams,
    step: u32,
}

impl AdamState {
    fn new(params: &EncoderParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut EncoderParams,
        grads: &EncoderParams,
        lr: f64,
        cfg: &AdamConfig,
    ) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let mut ps = params.named_tensors_mut();
        let gs = grads.named_tensors();
        let mut ms = self.m.named_tensors_mut();
        let mut vs = self.v.named_tensors_mut();
        for i in 0..ps.len() {
            let p = ps[i].1.data_mut();
            let g = gs[i].1.data();
            let m = ms[i].1.data_mut();
            let v = vs[i].1.data_mut();
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[j]);
            }
        }
    }
}

/// One per-episode log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogRow {
    pub epoch: usize,
    pub episode: usize,
    pub loss_global: f64,
    pub loss_local: f64,
    pub lr: f64,
}

/// One per-epoch log entry with the fused validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLogRow {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeLogRow>,
    pub epochs: Vec<EpochLogRow>,
}

impl TrainingLog {
    pub fn losses_global(&self) -> Vec<f64> {
        self.episodes.iter().map(|r| r.loss_global).collect()
    }

    pub fn losses_local(&self) -> Vec<f64> {
        self.episodes.iter().map(|r| r.loss_local).collect()
    }

    /// CSV with one row per episode and one per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,epoch,episode,loss_global,loss_local,lr,val_accuracy\n");
        let mut ep_iter = self.epochs.iter().peekable();
        for row in &self.episodes {
            out.push_str(&format!(
                "episode,{},{},{},{},{},\n",
                row.epoch, row.episode, row.loss_global, row.loss_local, row.lr
            ));
            if row.episode + 1 == self.episodes_per_epoch() {
                if let Some(e) = ep_iter.peek() {
                    if e.epoch == row.epoch {
                        let e = ep_iter.next().expect("peeked");
                        out.push_str(&format!("epoch,{},,,,,{}\n", e.epoch, e.val_accuracy));
                    }
                }
            }
        }
        for e in ep_iter {
            out.push_str(&format!("epoch,{},,,,,{}\n", e.epoch, e.val_accuracy));
        }
        out
    }

    fn episodes_per_epoch(&self) -> usize {
        self.episodes.iter().filter(|r| r.epoch == 0).count().max(1)
    }
}

/// Moving average with the given window (leading edge uses what is there).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0);
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let start = i.saturating_sub(window - 1);
            let slice = &values[start..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Trained encoders plus the tracking log.
pub struct TrainOutput {
    pub global: EncoderParams,
    pub local: EncoderParams,
    pub log: TrainingLog,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct EpisodeBatch<'a> {
    images: Vec<&'a crate::encoder::Image>,
    n_support: usize,
    labels: Vec<usize>,
}

fn episode_batch<'a>(dataset: &'a Dataset, episode: &Episode) -> EpisodeBatch<'a> {
    let images: Vec<&crate::encoder::Image> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|item| dataset.image(item.image))
        .collect();
    EpisodeBatch {
        images,
        n_support: episode.support.len(),
        labels: episode.query.iter().map(|q| q.class).collect(),
    }
}

enum BranchKind {
    Global,
    Local,
    Both,
}

/// Forwards an episode on a fresh tape, builds the requested loss(es), and
/// returns (loss_global, loss_local, gradients).
fn episode_step(
    params: &EncoderParams,
    batch: &EpisodeBatch,
    n_way: usize,
    epsilon_scale: f64,
    kind: BranchKind,
) -> Result<(Option<f64>, Option<f64>, EncoderParams), EpisodicError> {
    let mut tape = Tape::new();
    let nodes = stage_params(&mut tape, params);
    let mut embeddings = Vec::with_capacity(batch.images.len());
    for img in &batch.images {
        embeddings.push(forward(&mut tape, &nodes, &params.config, img)?);
    }
    let (support, query) = embeddings.split_at(batch.n_support);
    let (loss_node, loss_g, loss_l) = match kind {
        BranchKind::Global => {
            let lg = build_global_loss(&mut tape, support, query, n_way, &batch.labels);
            (lg, Some(tape.scalar(lg)), None)
        }
        BranchKind::Local => {
            let ll = build_local_loss(
                &mut tape,
                support,
                query,
                n_way,
                &batch.labels,
                epsilon_scale,
            )?;
            (ll, None, Some(tape.scalar(ll)))
        }
        BranchKind::Both => {
            let lg = build_global_loss(&mut tape, support, query, n_way, &batch.labels);
            let ll = build_local_loss(
                &mut tape,
                support,
                query,
                n_way,
                &batch.labels,
                epsilon_scale,
            )?;
            let sum = tape.add(lg, ll);
            (sum, Some(tape.scalar(lg)), Some(tape.scalar(ll)))
        }
    };
    let loss_val = tape.scalar(loss_node);
    if !loss_val.is_finite() {
        return Err(EpisodicError::Encoder(
            crate::encoder::EncoderError::NonFiniteLoss,
        ));
    }
    let grads_all = tape.backward(loss_node);
    let mut grads = params.zeros_like();
    for ((_, dst), &id) in grads.named_tensors_mut().into_iter().zip(&nodes.ids) {
        *dst = grads_all.get(id).clone();
    }
    if !grads.all_finite() {
        return Err(EpisodicError::Encoder(
            crate::encoder::EncoderError::NonFiniteLoss,
        ));
    }
    Ok((loss_g, loss_l, grads))
}

/// Runs dual-branch episodic meta-training.
///
/// The two encoders are initialized from seeds derived from `run.seed` and
/// optimize independently (unless `share_params`, where one encoder takes
/// the summed loss). A fixed set of validation episodes is sampled up front;
/// the returned parameters are the snapshots with the best fused validation
/// accuracy (earliest epoch wins ties). Fully deterministic for a fixed
/// `(seed, config, dataset)`.
pub fn meta_train(
    run: &RunConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
) -> Result<TrainOutput, EpisodicError> {
    run.validate()?;
    let seed_g = splitmix64(run.seed ^ 0x6c6f_62616c);
    let seed_l = splitmix64(run.seed ^ 0x6c6f_63616c);
    let mut params_g = init_params(&run.encoder, seed_g)?;
    let mut params_l = if run.share_params {
        params_g.clone()
    } else {
        init_params(&run.encoder, seed_l)?
    };
    let mut log = TrainingLog::default();
    if run.epochs == 0 || run.episodes_per_epoch == 0 {
        return Ok(TrainOutput {
            global: params_g,
            local: params_l,
            log,
        });
    }

    let mut episode_rng = stream_rng(run.seed, 1);
    let mut val_rng = stream_rng(run.seed, 2);
    let val_episodes: Vec<Episode> = (0..run.val_episodes)
        .map(|_| sample_episode(val_ds, run.n_way, run.k_shot, run.t_query, &mut val_rng))
        .collect::<Result<_, _>>()?;
    let eval_opts = run.eval_options();

    let mut adam_g = AdamState::new(&params_g);
    let mut adam_l = AdamState::new(&params_l);
    let total_steps = run.epochs * run.episodes_per_epoch;
    let mut best: Option<(f64, EncoderParams, EncoderParams)> = None;

    for epoch in 0..run.epochs {
        for episode_index in 0..run.episodes_per_epoch {
            let episode = sample_episode(
                train_ds,
                run.n_way,
                run.k_shot,
                run.t_query,
                &mut episode_rng,
            )?;
            let batch = episode_batch(train_ds, &episode);
            let step = epoch * run.episodes_per_epoch + episode_index;
            let lr = cosine_lr(step, total_steps, run.lr_init, run.lr_final);

            let non_finite = |_e: EpisodicError| EpisodicError::NonFiniteLoss {
                epoch,
                episode_index,
                episode: episode.clone(),
            };

            let (loss_g, loss_l) = if run.share_params {
                let (lg, ll, grads) = episode_step(
                    &params_g,
                    &batch,
                    run.n_way,
                    run.epsilon_scale,
                    BranchKind::Both,
                )
                .map_err(non_finite)?;
                adam_g.update(&mut params_g, &grads, lr, &run.adam);
                params_l = params_g.clone();
                (lg.expect("global loss"), ll.expect("local loss"))
            } else {
                let (lg, _, grads_g) = episode_step(
                    &params_g,
                    &batch,
                    run.n_way,
                    run.epsilon_scale,
                    BranchKind::Global,
                )
                .map_err(non_finite)?;
                adam_g.update(&mut params_g, &grads_g, lr, &run.adam);
                let (_, ll, grads_l) = episode_step(
                    &params_l,
                    &batch,
                    run.n_way,
                    run.epsilon_scale,
                    BranchKind::Local,
                )
                .map_err(non_finite)?;
                adam_l.update(&mut params_l, &grads_l, lr, &run.adam);
                (lg.expect("global loss"), ll.expect("local loss"))
            };

            log.episodes.push(EpisodeLogRow {
                epoch,
                episode: episode_index,
                loss_global: loss_g,
                loss_local: loss_l,
                lr,
            });
        }

        if !val_episodes.is_empty() {
            let mut acc = 0.0;
            for ep in &val_episodes {
                acc += episode_fused_accuracy(&params_g, &params_l, val_ds, ep, &eval_opts)?;
            }
            acc /= val_episodes.len() as f64;
            let is_best = best.as_ref().map(|(b, _, _)| acc > *b).unwrap_or(true);
            if is_best {
                best = Some((acc, params_g.clone(), params_l.clone()));
            }
            log.epochs.push(EpochLogRow {
                epoch,
                val_accuracy: acc,
                is_best,
            });
        }
    }

    let (global, local) = match best {
        Some((_, g, l)) => (g, l),
        None => (params_g, params_l),
    };
    Ok(TrainOutput { global, local, log })
}

/// Fits the adaptive fusion head on frozen encoders: gradient steps on the
/// two fusion weights with running batch statistics, over training episodes.
pub fn train_adaptive_fusion(
    global_params: &EncoderParams,
    local_params: &EncoderParams,
    train_ds: &Dataset,
    run: &RunConfig,
    episodes: usize,
    lr: f64,
) -> Result<AdaptiveFusionParams, EpisodicError> {
    let mut params = AdaptiveFusionParams::default();
    let mut rng = stream_rng(run.seed, 3);
    for _ in 0..episodes {
        let episode = sample_episode(train_ds, run.n_way, run.k_shot, run.t_query, &mut rng)?;
        let distances = episode_distances(
            global_params,
            local_params,
            train_ds,
            &episode,
            Some(MetricKind::Sqr),
            Some(MetricKind::Kl),
            run.epsilon_scale,
        )?;
        let mut grad = [0.0f64; 2];
        for qd in &distances {
            let (_, nl, ng) = fuse_adaptive_train(&qd.d_local, &qd.d_global, &mut params)?;
            let (_, g) = adaptive_ce_grad(&nl, &ng, &params.omega, qd.truth);
            grad[0] += g[0];
            grad[1] += g[1];
        }
        let scale = lr / distances.len() as f64;
        params.omega[0] -= scale * grad[0];
        params.omega[1] -= scale * grad[1];
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

/// Writes encoder weights as a tensor container plus a JSON sidecar with the
/// run configuration.
pub fn save_checkpoint(
    path: &Path,
    params: &EncoderParams,
    run: &RunConfig,
) -> Result<(), DataError> {
    let mut map = TensorMap::new();
    for (name, tensor) in params.named_tensors() {
        map.insert(
            name,
            TensorData::f64(vec![tensor.rows(), tensor.cols()], tensor.data().to_vec()),
        );
    }
    save_tensor_map(path, &map)?;
    let json = serde_json::to_vec_pretty(run)?;
    atomic_write(&sidecar_path(path), &json)
}

/// Loads encoder weights and the run configuration saved next to them.
pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, RunConfig), DataError> {
    let sidecar = sidecar_path(path);
    let bytes = std::fs::read(&sidecar).map_err(|e| DataError::Io {
        path: sidecar.display().to_string(),
        source: e,
    })?;
    let run: RunConfig = serde_json::from_slice(&bytes)?;
    let map = load_tensor_map(path)?;
    let mut params = init_params(&run.encoder, 0).map_err(|e| DataError::Format {
        offset: 0,
        message: format!("encoder config in sidecar invalid: {e}"),
    })?;
    for (name, dst) in params.named_tensors_mut() {
        let tensor = map.get(&name).ok_or_else(|| DataError::Format {
            offset: 0,
            message: format!("checkpoint missing tensor '{name}'"),
        })?;
        if tensor.dims != vec![dst.rows(), dst.cols()] {
            return Err(DataError::Format {
                offset: 0,
                message: format!(
                    "tensor '{name}' has dims {:?}, expected [{}, {}]",
                    tensor.dims,
                    dst.rows(),
                    dst.cols()
                ),
            });
        }
        match &tensor.payload {
            TensorPayload::F64(v) => dst.data_mut().copy_from_slice(v),
            TensorPayload::F32(_) => {
                return Err(DataError::Format {
                    offset: 0,
                    message: format!("tensor '{name}' must be f64"),
                })
            }
        }
    }
    if map.len() != params.named_tensors().len() {
        return Err(DataError::Format {
            offset: 0,
            message: format!(
                "checkpoint has {} tensors, expected {}",
                map.len(),
                params.named_tensors().len()
            ),
        });
    }
    Ok((params, run))
}
