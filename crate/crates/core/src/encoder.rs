//! Compact vision-transformer encoder.
//!
//! Each image is split into non-overlapping patches, linearly projected,
//! prefixed with a learnable class token, combined with positional
//! embeddings, and passed through pre-norm attention/MLP blocks. The class
//! token output is the global feature; the patch token outputs are the local
//! features. The forward pass always runs on an autodiff [`Tape`], so
//! inference and training share one code path.

use crate::autodiff::{NodeId, Tape};
use crate::numerics::{Matrix, NumericsError, Vector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite loss or gradient")]
    NonFiniteLoss,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Architecture hyperparameters of one encoder branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            channels: 3,
        }
    }
}

impl EncoderConfig {
    /// Number of patch tokens.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch dimension (pixels x channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(EncoderError::InvalidConfig(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(EncoderError::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_dim() == 0 {
            return Err(EncoderError::InvalidConfig(
                "depth, channels and mlp dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Raw pixel container, values expected in `[0, 1]`, H x W x C interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_w: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_w: Matrix,
    pub ln2_b: Matrix,
    pub mlp_w1: Matrix,
    pub mlp_b1: Matrix,
    pub mlp_w2: Matrix,
    pub mlp_b2: Matrix,
}

/// All learnable weights of one encoder branch.
///
/// Doubles as the container for gradient and optimizer-moment bundles,
/// which share the same named-tensor structure.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_proj_w: Matrix,
    pub patch_proj_b: Matrix,
    pub class_token: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_ln_w: Matrix,
    pub final_ln_b: Matrix,
}

/// Per-image embedding pair: one global vector and M local vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEmbedding {
    pub global: Vector,
    pub local: Vec<Vector>,
}

/// Raw per-layer, per-head attention weights, each row-stochastic.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Matrix>>,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;
/// Fixed per-channel standardization constants: `[0,1]` pixels map to
/// `[-1,1]` inputs.
const CHANNEL_MEAN: f64 = 0.5;
const CHANNEL_STD: f64 = 0.5;

fn trunc_normal(rng: &mut ChaCha8Rng, dist: &Normal<f64>) -> f64 {
    // Resample outside two standard deviations.
    loop {
        let x: f64 = rng.sample(dist);
        if x.abs() <= 2.0 * INIT_STD {
            return x;
        }
    }
}

fn trunc_normal_matrix(
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
    dist: &Normal<f64>,
) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = trunc_normal(rng, dist);
    }
    m
}

fn ones(cols: usize) -> Matrix {
    Matrix::from_vec(1, cols, vec![1.0; cols])
}

/// Deterministically initializes encoder weights for a seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    let c = config.embed_dim;
    let m = config.num_patches();
    let h = config.mlp_dim();
    let blocks = (0..config.depth)
        .map(|_| BlockParams {
            ln1_w: ones(c),
            ln1_b: Matrix::zeros(1, c),
            wq: trunc_normal_matrix(c, c, &mut rng, &dist),
            bq: Matrix::zeros(1, c),
            wk: trunc_normal_matrix(c, c, &mut rng, &dist),
            bk: Matrix::zeros(1, c),
            wv: trunc_normal_matrix(c, c, &mut rng, &dist),
            bv: Matrix::zeros(1, c),
            wo: trunc_normal_matrix(c, c, &mut rng, &dist),
            bo: Matrix::zeros(1, c),
            ln2_w: ones(c),
            ln2_b: Matrix::zeros(1, c),
            mlp_w1: trunc_normal_matrix(c, h, &mut rng, &dist),
            mlp_b1: Matrix::zeros(1, h),
            mlp_w2: trunc_normal_matrix(h, c, &mut rng, &dist),
            mlp_b2: Matrix::zeros(1, c),
        })
        .collect();
    Ok(EncoderParams {
        patch_proj_w: trunc_normal_matrix(config.patch_dim(), c, &mut rng, &dist),
        patch_proj_b: Matrix::zeros(1, c),
        class_token: trunc_normal_matrix(1, c, &mut rng, &dist),
        pos_embed: trunc_normal_matrix(m + 1, c, &mut rng, &dist),
        blocks,
        final_ln_w: ones(c),
        final_ln_b: Matrix::zeros(1, c),
        config: config.clone(),
    })
}

impl EncoderParams {
    /// Zero-filled bundle with the same shapes (gradients, moments).
    pub fn zeros_like(&self) -> EncoderParams {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        EncoderParams {
            config: self.config.clone(),
            patch_proj_w: z(&self.patch_proj_w),
            patch_proj_b: z(&self.patch_proj_b),
            class_token: z(&self.class_token),
            pos_embed: z(&self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_w: z(&b.ln1_w),
                    ln1_b: z(&b.ln1_b),
                    wq: z(&b.wq),
                    bq: z(&b.bq),
                    wk: z(&b.wk),
                    bk: z(&b.bk),
                    wv: z(&b.wv),
                    bv: z(&b.bv),
                    wo: z(&b.wo),
                    bo: z(&b.bo),
                    ln2_w: z(&b.ln2_w),
                    ln2_b: z(&b.ln2_b),
                    mlp_w1: z(&b.mlp_w1),
                    mlp_b1: z(&b.mlp_b1),
                    mlp_w2: z(&b.mlp_w2),
                    mlp_b2: z(&b.mlp_b2),
                })
                .collect(),
            final_ln_w: z(&self.final_ln_w),
            final_ln_b: z(&self.final_ln_b),
        }
    }

    /// Named views over every tensor, in a fixed canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("patch_proj.w".into(), &self.patch_proj_w),
            ("patch_proj.b".into(), &self.patch_proj_b),
            ("class_token".into(), &self.class_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.w"), &b.ln1_w));
            out.push((format!("block{i}.ln1.b"), &b.ln1_b));
            out.push((format!("block{i}.attn.wq"), &b.wq));
            out.push((format!("block{i}.attn.bq"), &b.bq));
            out.push((format!("block{i}.attn.wk"), &b.wk));
            out.push((format!("block{i}.attn.bk"), &b.bk));
            out.push((format!("block{i}.attn.wv"), &b.wv));
            out.push((format!("block{i}.attn.bv"), &b.bv));
            out.push((format!("block{i}.attn.wo"), &b.wo));
            out.push((format!("block{i}.attn.bo"), &b.bo));
            out.push((format!("block{i}.ln2.w"), &b.ln2_w));
            out.push((format!("block{i}.ln2.b"), &b.ln2_b));
            out.push((format!("block{i}.mlp.w1"), &b.mlp_w1));
            out.push((format!("block{i}.mlp.b1"), &b.mlp_b1));
            out.push((format!("block{i}.mlp.w2"), &b.mlp_w2));
            out.push((format!("block{i}.mlp.b2"), &b.mlp_b2));
        }
        out.push(("final_ln.w".into(), &self.final_ln_w));
        out.push(("final_ln.b".into(), &self.final_ln_b));
        out
    }

    /// Mutable counterpart of [`EncoderParams::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("patch_proj.w".into(), &mut self.patch_proj_w),
            ("patch_proj.b".into(), &mut self.patch_proj_b),
            ("class_token".into(), &mut self.class_token),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln1.w"), &mut b.ln1_w));
            out.push((format!("block{i}.ln1.b"), &mut b.ln1_b));
            out.push((format!("block{i}.attn.wq"), &mut b.wq));
            out.push((format!("block{i}.attn.bq"), &mut b.bq));
            out.push((format!("block{i}.attn.wk"), &mut b.wk));
            out.push((format!("block{i}.attn.bk"), &mut b.bk));
            out.push((format!("block{i}.attn.wv"), &mut b.wv));
            out.push((format!("block{i}.attn.bv"), &mut b.bv));
            out.push((format!("block{i}.attn.wo"), &mut b.wo));
            out.push((format!("block{i}.attn.bo"), &mut b.bo));
            out.push((format!("block{i}.ln2.w"), &mut b.ln2_w));
            out.push((format!("block{i}.ln2.b"), &mut b.ln2_b));
            out.push((format!("block{i}.mlp.w1"), &mut b.mlp_w1));
            out.push((format!("block{i}.mlp.b1"), &mut b.mlp_b1));
            out.push((format!("block{i}.mlp.w2"), &mut b.mlp_w2));
            out.push((format!("block{i}.mlp.b2"), &mut b.mlp_b2));
        }
        out.push(("final_ln.w".into(), &mut self.final_ln_w));
        out.push(("final_ln.b".into(), &mut self.final_ln_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, m)| m.data().len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.all_finite())
    }
}

/// Tape handles for one staged parameter set, in canonical tensor order.
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
}

/// Stages every parameter as a tape leaf.
pub fn stage_params(tape: &mut Tape, params: &EncoderParams) -> ParamNodes {
    let ids = params
        .named_tensors()
        .into_iter()
        .map(|(_, m)| tape.leaf(m.clone()))
        .collect();
    ParamNodes { ids }
}

struct BlockNodes {
    ln1_w: NodeId,
    ln1_b: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_w: NodeId,
    ln2_b: NodeId,
    mlp_w1: NodeId,
    mlp_b1: NodeId,
    mlp_w2: NodeId,
    mlp_b2: NodeId,
}

struct NodeView<'a> {
    ids: &'a [NodeId],
    depth: usize,
}

impl<'a> NodeView<'a> {
    fn new(nodes: &'a ParamNodes, depth: usize) -> Self {
        Self {
            ids: &nodes.ids,
            depth,
        }
    }
    fn patch_proj_w(&self) -> NodeId {
        self.ids[0]
    }
    fn patch_proj_b(&self) -> NodeId {
        self.ids[1]
    }
    fn class_token(&self) -> NodeId {
        self.ids[2]
    }
    fn pos_embed(&self) -> NodeId {
        self.ids[3]
    }
    fn block(&self, i: usize) -> BlockNodes {
        let base = 4 + i * 16;
        BlockNodes {
            ln1_w: self.ids[base],
            ln1_b: self.ids[base + 1],
            wq: self.ids[base + 2],
            bq: self.ids[base + 3],
            wk: self.ids[base + 4],
            bk: self.ids[base + 5],
            wv: self.ids[base + 6],
            bv: self.ids[base + 7],
            wo: self.ids[base + 8],
            bo: self.ids[base + 9],
            ln2_w: self.ids[base + 10],
            ln2_b: self.ids[base + 11],
            mlp_w1: self.ids[base + 12],
            mlp_b1: self.ids[base + 13],
            mlp_w2: self.ids[base + 14],
            mlp_b2: self.ids[base + 15],
        }
    }
    fn final_ln_w(&self) -> NodeId {
        self.ids[4 + self.depth * 16]
    }
    fn final_ln_b(&self) -> NodeId {
        self.ids[5 + self.depth * 16]
    }
}

/// Tape handles for one encoded image.
pub struct TapedEmbedding {
    /// 1 x C class-token output.
    pub global: NodeId,
    /// M x C patch-token outputs.
    pub locals: NodeId,
    /// Attention softmax nodes, per layer then per head.
    pub attention: Vec<Vec<NodeId>>,
}

/// Standardizes pixels per channel with fixed constants and flattens into an
/// M x patch_dim matrix. Patches are in row-major grid order; within a
/// patch, values are row-major by pixel then channel.
pub fn patchify(config: &EncoderConfig, image: &Image) -> Result<Matrix> {
    if image.height != config.image_size
        || image.width != config.image_size
        || image.channels != config.channels
    {
        return Err(EncoderError::DimensionMismatch(format!(
            "image {}x{}x{} does not match config {}x{}x{}",
            image.height,
            image.width,
            image.channels,
            config.image_size,
            config.image_size,
            config.channels
        )));
    }
    let p = config.patch_size;
    let side = config.image_size / p;
    let mut out = Matrix::zeros(config.num_patches(), config.patch_dim());
    for py in 0..side {
        for px in 0..side {
            let row = out.row_mut(py * side + px);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..config.channels {
                        let v = image.get(py * p + dy, px * p + dx, ch) as f64;
                        row[k] = (v - CHANNEL_MEAN) / CHANNEL_STD;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Runs the encoder forward pass on the tape.
pub fn forward(
    tape: &mut Tape,
    nodes: &ParamNodes,
    config: &EncoderConfig,
    image: &Image,
) -> Result<TapedEmbedding> {
    let patches = patchify(config, image)?;
    let view = NodeView::new(nodes, config.depth);
    let m = config.num_patches();
    let heads = config.heads;
    let dh = config.head_dim();

    let patch_in = tape.leaf(patches);
    let projected = tape.matmul(patch_in, view.patch_proj_w());
    let projected = tape.add_row_broadcast(projected, view.patch_proj_b());
    let with_class = tape.concat_rows(&[view.class_token(), projected]);
    let mut x = tape.add(with_class, view.pos_embed());

    let mut attention = Vec::with_capacity(config.depth);
    for layer in 0..config.depth {
        let blk = view.block(layer);
        let normed = tape.layer_norm(x, blk.ln1_w, blk.ln1_b, LN_EPS);
        let q = tape.matmul(normed, blk.wq);
        let q = tape.add_row_broadcast(q, blk.bq);
        let k = tape.matmul(normed, blk.wk);
        let k = tape.add_row_broadcast(k, blk.bk);
        let v = tape.matmul(normed, blk.wv);
        let v = tape.add_row_broadcast(v, blk.bv);

        let mut head_outs = Vec::with_capacity(heads);
        let mut head_attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.row_softmax(scores);
            head_attn.push(attn);
            head_outs.push(tape.matmul(attn, vh));
        }
        attention.push(head_attn);
        let merged = tape.concat_cols(&head_outs);
        let projected = tape.matmul(merged, blk.wo);
        let projected = tape.add_row_broadcast(projected, blk.bo);
        x = tape.add(x, projected);

        let normed2 = tape.layer_norm(x, blk.ln2_w, blk.ln2_b, LN_EPS);
        let hidden = tape.matmul(normed2, blk.mlp_w1);
        let hidden = tape.add_row_broadcast(hidden, blk.mlp_b1);
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, blk.mlp_w2);
        let out = tape.add_row_broadcast(out, blk.mlp_b2);
        x = tape.add(x, out);
    }

    let final_norm = tape.layer_norm(x, view.final_ln_w(), view.final_ln_b(), LN_EPS);
    let global = tape.slice_rows(final_norm, 0, 1);
    let locals = tape.slice_rows(final_norm, 1, m);
    Ok(TapedEmbedding {
        global,
        locals,
        attention,
    })
}

/// Encodes one image, returning its embeddings and raw attention weights.
pub fn encode(params: &EncoderParams, image: &Image) -> Result<(DualEmbedding, AttentionRecord)> {
    let mut tape = Tape::new();
    let nodes = stage_params(&mut tape, params);
    let emb = forward(&mut tape, &nodes, &params.config, image)?;
    let global = Vector::from_vec(tape.value(emb.global).data().to_vec());
    let locals_mat = tape.value(emb.locals);
    let local = (0..locals_mat.rows())
        .map(|i| Vector::from_vec(locals_mat.row(i).to_vec()))
        .collect();
    let layers = emb
        .attention
        .iter()
        .map(|heads| heads.iter().map(|&id| tape.value(id).clone()).collect())
        .collect();
    Ok((DualEmbedding { global, local }, AttentionRecord { layers }))
}

/// Encodes a batch image-by-image (no cross-image interaction).
pub fn encode_batch(params: &EncoderParams, images: &[Image]) -> Result<Vec<DualEmbedding>> {
    images
        .iter()
        .map(|img| encode(params, img).map(|(e, _)| e))
        .collect()
}

/// Computes the loss value and exact reverse-mode parameter gradients for a
/// scalar loss built from the encoder outputs of `batch`.
///
/// The closure receives the tape and one [`TapedEmbedding`] per input image
/// and must return a 1x1 loss node composed of supported tape operations.
pub fn grad<F>(params: &EncoderParams, batch: &[Image], loss_fn: F) -> Result<(f64, EncoderParams)>
where
    F: FnOnce(&mut Tape, &[TapedEmbedding]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let nodes = stage_params(&mut tape, params);
    let embeddings = batch
        .iter()
        .map(|img| forward(&mut tape, &nodes, &params.config, img))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&mut tape, &embeddings)?;
    let loss_val = tape.scalar(loss);
    if !loss_val.is_finite() {
        return Err(EncoderError::NonFiniteLoss);
    }
    let grads = tape.backward(loss);
    let mut out = params.zeros_like();
    for ((_, dst), &id) in out.named_tensors_mut().into_iter().zip(&nodes.ids) {
        *dst = grads.get(id).clone();
    }
    if !out.all_finite() {
        return Err(EncoderError::NonFiniteLoss);
    }
    Ok((loss_val, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64, config: &EncoderConfig) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(config.image_size, config.image_size, config.channels);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0f32);
        }
        img
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::default();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_depends_on_seed() {
        let cfg = EncoderConfig::default();
        let a = init_params(&cfg, 1).unwrap();
        let b = init_params(&cfg, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn init_rejects_bad_config() {
        let cfg = EncoderConfig {
            patch_size: 7,
            ..EncoderConfig::default()
        };
        assert!(matches!(
            init_params(&cfg, 0),
            Err(EncoderError::InvalidConfig(_))
        ));
        let cfg = EncoderConfig {
            heads: 5,
            ..EncoderConfig::default()
        };
        assert!(matches!(
            init_params(&cfg, 0),
            Err(EncoderError::InvalidConfig(_))
        ));
    }

    #[test]
    fn param_count_matches_shape_arithmetic() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 0).unwrap();
        // Closed-form count from the architecture shapes.
        let c = 64;
        let m = 16;
        let pd = 8 * 8 * 3;
        let h = 128;
        let per_block = 2 * c          // first norm
            + 3 * (c * c + c)          // q, k, v projections
            + (c * c + c)              // output projection
            + 2 * c                    // second norm
            + (c * h + h)              // mlp in
            + (h * c + c); // mlp out
        let expect = (pd * c + c) + c + (m + 1) * c + 2 * per_block + 2 * c;
        assert_eq!(params.num_params(), expect);
    }

    #[test]
    fn encode_shapes_and_attention_rows() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 3).unwrap();
        let img = test_image(1, &cfg);
        let (emb, attn) = encode(&params, &img).unwrap();
        assert_eq!(emb.global.dim(), cfg.embed_dim);
        assert_eq!(emb.local.len(), cfg.num_patches());
        assert!(emb.global.all_finite());
        assert_eq!(attn.layers.len(), cfg.depth);
        for heads in &attn.layers {
            assert_eq!(heads.len(), cfg.heads);
            for a in heads {
                assert_eq!(a.rows(), cfg.num_patches() + 1);
                assert_eq!(a.cols(), cfg.num_patches() + 1);
                for i in 0..a.rows() {
                    let s: f64 = a.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
                    assert!(a.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 3).unwrap();
        let img = test_image(2, &cfg);
        let (a, _) = encode(&params, &img).unwrap();
        let (b, _) = encode(&params, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 3).unwrap();
        let img = Image::new(16, 16, 3);
        assert!(matches!(
            encode(&params, &img),
            Err(EncoderError::DimensionMismatch(_))
        ));
    }

    fn permute_patches(img: &Image, patch: usize, perm: &[usize]) -> Image {
        let side = img.height / patch;
        let mut out = img.clone();
        for (dst_idx, &src_idx) in perm.iter().enumerate() {
            let (sy, sx) = (src_idx / side, src_idx % side);
            let (dy, dx) = (dst_idx / side, dst_idx % side);
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..img.channels {
                        let v = img.get(sy * patch + py, sx * patch + px, ch);
                        out.set(dy * patch + py, dx * patch + px, ch, v);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = EncoderConfig::default();
        let mut params = init_params(&cfg, 5).unwrap();
        params.pos_embed = Matrix::zeros(cfg.num_patches() + 1, cfg.embed_dim);
        let img = test_image(4, &cfg);
        // A fixed permutation of the 16 patches (7 is coprime to 16).
        let perm: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 16).collect();
        let permuted = permute_patches(&img, cfg.patch_size, &perm);
        let (e1, _) = encode(&params, &img).unwrap();
        let (e2, _) = encode(&params, &permuted).unwrap();
        let gdiff = e1.global.sub(&e2.global).norm() / e1.global.norm();
        assert!(gdiff < 1e-10, "global changed by {gdiff}");
        for (dst_idx, &src_idx) in perm.iter().enumerate() {
            let d = e2.local[dst_idx].sub(&e1.local[src_idx]).norm();
            let scale = e1.local[src_idx].norm().max(1e-12);
            assert!(d / scale < 1e-10, "patch {dst_idx} mismatch {d}");
        }
    }

    #[test]
    fn batch_equals_per_image() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 6).unwrap();
        let images: Vec<Image> = (0..3).map(|i| test_image(10 + i, &cfg)).collect();
        let batch = encode_batch(&params, &images).unwrap();
        for (img, be) in images.iter().zip(&batch) {
            let (single, _) = encode(&params, img).unwrap();
            assert_eq!(&single, be);
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 8).unwrap();
        let img = test_image(5, &cfg);
        let (loss, grads) = grad(&params, std::slice::from_ref(&img), |tape, _embs| {
            Ok(tape.scalar_leaf(3.25))
        })
        .unwrap();
        assert_eq!(loss, 3.25);
        for (_, g) in grads.named_tensors() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn global_norm_loss_matches_finite_differences() {
        let cfg = EncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            channels: 3,
        };
        let params = init_params(&cfg, 9).unwrap();
        let img = test_image(6, &cfg);
        let loss_fn = |tape: &mut Tape, embs: &[TapedEmbedding]| {
            let g = embs[0].global;
            let gt = tape.transpose(g);
            let sq = tape.matmul(g, gt);
            Ok(tape.scale(sq, 0.5))
        };
        let (_, grads) = grad(&params, std::slice::from_ref(&img), loss_fn).unwrap();

        let eval = |p: &EncoderParams| {
            let mut tape = Tape::new();
            let nodes = stage_params(&mut tape, p);
            let emb = forward(&mut tape, &nodes, &cfg, &img).unwrap();
            let gt = tape.transpose(emb.global);
            let sq = tape.matmul(emb.global, gt);
            let out = tape.scale(sq, 0.5);
            tape.scalar(out)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let coords: Vec<(usize, usize)> = {
            let tensors = params.named_tensors();
            (0..30)
                .map(|_| {
                    let t = rng.random_range(0..tensors.len());
                    let i = rng.random_range(0..tensors[t].1.data().len());
                    (t, i)
                })
                .collect()
        };
        for (t, i) in coords {
            let h = 1e-5;
            let mut plus = params.clone();
            plus.named_tensors_mut()[t].1.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.named_tensors_mut()[t].1.data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grads.named_tensors()[t].1.data()[i];
            let denom = ad.abs().max(fd.abs()).max(1e-8);
            assert!(
                (ad - fd).abs() / denom < 1e-4,
                "tensor {t} coord {i}: ad {ad} vs fd {fd}"
            );
        }
    }
}
