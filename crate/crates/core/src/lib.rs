//! Dual-branch few-shot image classification.
//!
//! Two compact vision-transformer encoders embed each image into a global
//! vector (class token) and a set of local patch vectors. A squared-Euclidean
//! metric on global prototypes and a Gaussian KL-divergence metric on local
//! feature distributions produce two per-class distance vectors, which are
//! L2-normalized and additively fused into a single similarity score used by
//! a nearest-neighbor classifier. Training is episodic with independent
//! losses per branch.
//!
//! Module layout:
//! - [`numerics`]: dense linear algebra (Cholesky, SPD solves, matrix square
//!   roots) and Gaussian estimation.
//! - [`autodiff`]: a small reverse-mode tape over matrices, including
//!   adjoints for log-determinant and SPD solves.
//! - [`encoder`]: the patch-token transformer encoder and its gradients.
//! - [`metrics`]: global and local distance functions.
//! - [`fusion`]: score normalization, weighted fusion, classification.
//! - [`episodic`]: datasets, episode sampling, meta-training, evaluation,
//!   and all on-disk formats.

pub mod autodiff;
pub mod encoder;
pub mod episodic;
pub mod fusion;
pub mod metrics;
pub mod numerics;

/// Initializes the global worker pool used for parallel task evaluation.
///
/// `threads == 0` selects the number of available CPUs. Calling this more
/// than once is harmless; only the first call takes effect.
pub fn init_parallelism(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}
