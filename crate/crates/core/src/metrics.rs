//! Distance functions between query and support-class summaries.
//!
//! Global kinds compare prototype vectors; local kinds compare Gaussian
//! distributions fit to patch-feature sets. Every kind is oriented so that
//! smaller means more similar, letting fusion and the softmax losses treat
//! them uniformly. The two trained heads (`sqr` on globals, `kl` on locals)
//! also have taped variants used inside the branch losses.

use crate::autodiff::{NodeId, Tape};
use crate::encoder::DualEmbedding;
use crate::numerics::{
    self, cholesky, log_det_from_factor, solve_with_factor, spd_sqrt, Matrix, NumericsError,
    Vector, COVARIANCE_EPS_FLOOR,
};
use thiserror::Error;

pub use crate::numerics::GaussianStats;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("summaries do not match metric kind {kind}")]
    SummaryMismatch { kind: MetricKind },
    #[error("metric failed for class {index}: {source}")]
    AtClass {
        index: usize,
        #[source]
        source: Box<MetricError>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Distance function identifier.
///
/// `Dot`, `Abs`, `Cos`, `Sqr` consume global prototypes; `Wass`, `Covar`,
/// `Kl` consume local-feature distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Dot,
    Abs,
    Cos,
    Sqr,
    Wass,
    Covar,
    Kl,
}

impl MetricKind {
    pub fn is_global(self) -> bool {
        matches!(self, Self::Dot | Self::Abs | Self::Cos | Self::Sqr)
    }

    pub fn is_local(self) -> bool {
        !self.is_global()
    }

    pub const GLOBAL_KINDS: [MetricKind; 4] = [Self::Dot, Self::Abs, Self::Cos, Self::Sqr];
    pub const LOCAL_KINDS: [MetricKind; 3] = [Self::Wass, Self::Covar, Self::Kl];
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Dot => "dot",
            Self::Abs => "abs",
            Self::Cos => "cos",
            Self::Sqr => "sqr",
            Self::Wass => "wass",
            Self::Covar => "covar",
            Self::Kl => "kl",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dot" => Ok(Self::Dot),
            "abs" => Ok(Self::Abs),
            "cos" => Ok(Self::Cos),
            "sqr" => Ok(Self::Sqr),
            "wass" => Ok(Self::Wass),
            "covar" => Ok(Self::Covar),
            "kl" => Ok(Self::Kl),
            other => Err(format!("unknown metric kind '{other}'")),
        }
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MetricError::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Mean of the K support class embeddings of one class.
pub fn prototype_global(class_embeddings: &[Vector]) -> Result<Vector> {
    assert!(!class_embeddings.is_empty(), "prototype needs K >= 1");
    let dim = class_embeddings[0].dim();
    let mut out = Vector::zeros(dim);
    for e in class_embeddings {
        check_dims(dim, e.dim())?;
        for (acc, &v) in out.data_mut().iter_mut().zip(e.data()) {
            *acc += v;
        }
    }
    let k = class_embeddings.len() as f64;
    for v in out.data_mut() {
        *v /= k;
    }
    Ok(out)
}

/// Squared Euclidean distance between two prototype vectors.
pub fn euclidean_sq(q: &Vector, s: &Vector) -> Result<f64> {
    check_dims(q.dim(), s.dim())?;
    let d = q.sub(s);
    Ok(d.dot(&d))
}

/// One of the four global-feature distances.
pub fn global_metric(kind: MetricKind, q: &Vector, s: &Vector) -> Result<f64> {
    check_dims(q.dim(), s.dim())?;
    match kind {
        MetricKind::Sqr => euclidean_sq(q, s),
        MetricKind::Abs => Ok(q
            .data()
            .iter()
            .zip(s.data())
            .map(|(a, b)| (a - b).abs())
            .sum()),
        // Negated inner product so that smaller still means more similar.
        MetricKind::Dot => Ok(-q.dot(s)),
        MetricKind::Cos => {
            let (nq, ns) = (q.norm(), s.norm());
            if nq == 0.0 || ns == 0.0 {
                return Err(MetricError::ZeroVector);
            }
            Ok(1.0 - q.dot(s) / (nq * ns))
        }
        _ => Err(MetricError::SummaryMismatch { kind }),
    }
}

/// KL divergence between two Gaussians, query first.
///
/// Computed from a Cholesky factor of the support covariance; no explicit
/// inverse is formed. Asymmetric in its arguments by construction.
pub fn kl_gaussian(q: &GaussianStats, s: &GaussianStats) -> Result<f64> {
    let c = q.dim();
    check_dims(c, s.dim())?;
    let ls = cholesky(&s.sigma)?;
    let lq = cholesky(&q.sigma)?;
    let solved = solve_with_factor(&ls, &q.sigma);
    let t_trace = solved.trace();
    let t_logdet = log_det_from_factor(&ls) - log_det_from_factor(&lq);
    let d = s.mu.sub(&q.mu);
    let d_col = Matrix::from_vec(c, 1, d.data().to_vec());
    let y = solve_with_factor(&ls, &d_col);
    let t_mahal: f64 = d.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    Ok(0.5 * (((t_trace + t_logdet) + t_mahal) - c as f64))
}

/// Squared 2-Wasserstein distance between two Gaussians (closed form).
pub fn wasserstein2_sq(q: &GaussianStats, s: &GaussianStats) -> Result<f64> {
    let c = q.dim();
    check_dims(c, s.dim())?;
    let d = q.mu.sub(&s.mu);
    let mean_term = d.dot(&d);
    let s_half = spd_sqrt(&s.sigma)?;
    let inner = s_half.matmul(&q.sigma).matmul(&s_half);
    let cross = spd_sqrt(&inner)?;
    let cov_term = q.sigma.trace() + s.sigma.trace() - 2.0 * cross.trace();
    Ok(mean_term + cov_term)
}

/// Covariance similarity turned into a distance: the mean quadratic form of
/// the direction-normalized query locals under the support covariance,
/// negated so smaller means more similar.
pub fn covar_metric(query_locals: &[Vector], s: &GaussianStats) -> Result<f64> {
    assert!(!query_locals.is_empty(), "covar needs at least one local");
    let c = s.dim();
    let mut acc = 0.0;
    for q in query_locals {
        check_dims(c, q.dim())?;
        let n = q.norm();
        if n == 0.0 {
            return Err(MetricError::ZeroVector);
        }
        let mut quad = 0.0;
        for i in 0..c {
            let qi = q[i] / n;
            if qi == 0.0 {
                continue;
            }
            let row = s.sigma.row(i);
            let mut inner = 0.0;
            for (j, &sij) in row.iter().enumerate() {
                inner += sij * q[j] / n;
            }
            quad += qi * inner;
        }
        acc += quad;
    }
    Ok(-acc / query_locals.len() as f64)
}

/// Per-class summaries the distance vector is computed against.
#[derive(Debug, Clone)]
pub enum ClassSummaries {
    /// One prototype vector per class (global kinds).
    Prototypes(Vec<Vector>),
    /// One pooled Gaussian per class (local kinds).
    Gaussians(Vec<GaussianStats>),
}

impl ClassSummaries {
    pub fn len(&self) -> usize {
        match self {
            Self::Prototypes(p) => p.len(),
            Self::Gaussians(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Distance from one query to each of the N support classes.
///
/// Global kinds compare the query's global feature against class prototypes.
/// Local kinds fit a Gaussian to the query's M local features
/// (`epsilon_scale` controls the shrinkage) and compare against the pooled
/// class Gaussians; `covar` uses the raw query locals directly.
pub fn class_distance_vector(
    kind: MetricKind,
    query: &DualEmbedding,
    summaries: &ClassSummaries,
    epsilon_scale: f64,
) -> Result<Vec<f64>> {
    assert!(summaries.len() >= 2, "need at least two support classes");
    let at = |index: usize, e: MetricError| MetricError::AtClass {
        index,
        source: Box::new(e),
    };
    match (kind.is_global(), summaries) {
        (true, ClassSummaries::Prototypes(protos)) => protos
            .iter()
            .enumerate()
            .map(|(n, p)| global_metric(kind, &query.global, p).map_err(|e| at(n, e)))
            .collect(),
        (false, ClassSummaries::Gaussians(stats)) => {
            let q_stats = if kind == MetricKind::Covar {
                None
            } else {
                Some(numerics::fit_gaussian(&query.local, epsilon_scale)?)
            };
            stats
                .iter()
                .enumerate()
                .map(|(n, s)| {
                    let r = match kind {
                        MetricKind::Kl => kl_gaussian(q_stats.as_ref().unwrap(), s),
                        MetricKind::Wass => wasserstein2_sq(q_stats.as_ref().unwrap(), s),
                        MetricKind::Covar => covar_metric(&query.local, s),
                        _ => unreachable!(),
                    };
                    r.map_err(|e| at(n, e))
                })
                .collect()
        }
        _ => Err(MetricError::SummaryMismatch { kind }),
    }
}

// ---------------------------------------------------------------------------
// Taped variants of the two trained heads.
// ---------------------------------------------------------------------------

/// Differentiable Gaussian fit over an M x C matrix of local features.
/// Returns `(mu, sigma)` nodes; mirrors [`numerics::fit_gaussian`] exactly,
/// including the trace-scaled shrinkage and its gradient.
pub fn taped_fit_gaussian(tape: &mut Tape, locals: NodeId, epsilon_scale: f64) -> (NodeId, NodeId) {
    let m = tape.value(locals).rows() as f64;
    let c = tape.value(locals).cols() as f64;
    let mu = tape.mean_rows(locals);
    let neg_mu = tape.scale(mu, -1.0);
    let centered = tape.add_row_broadcast(locals, neg_mu);
    let ct = tape.transpose(centered);
    let raw = tape.matmul(ct, centered);
    let raw = tape.scale(raw, 1.0 / m);
    let tr = tape.trace(raw);
    let tr = tape.scale(tr, 1.0 / c);
    let floored = tape.max_const(tr, COVARIANCE_EPS_FLOOR);
    let eps = tape.scale(floored, epsilon_scale);
    let sigma = tape.add_scaled_identity(raw, eps);
    (mu, sigma)
}

/// Differentiable KL divergence between two taped Gaussians, query first.
pub fn taped_kl_gaussian(
    tape: &mut Tape,
    mu_q: NodeId,
    sigma_q: NodeId,
    mu_s: NodeId,
    sigma_s: NodeId,
) -> std::result::Result<NodeId, NumericsError> {
    let c = tape.value(mu_q).cols() as f64;
    let solved = tape.spd_solve(sigma_s, sigma_q)?;
    let t_trace = tape.trace(solved);
    let ld_s = tape.log_det_spd(sigma_s)?;
    let ld_q = tape.log_det_spd(sigma_q)?;
    let t_logdet = tape.sub(ld_s, ld_q);
    let d = tape.sub(mu_s, mu_q);
    let dt = tape.transpose(d);
    let y = tape.spd_solve(sigma_s, dt)?;
    let t_mahal = tape.matmul(d, y);
    let sum = tape.add_n(&[t_trace, t_logdet, t_mahal]);
    let sum = tape.add_const(sum, -c);
    Ok(tape.scale(sum, 0.5))
}

/// Differentiable squared Euclidean distance between two 1 x C rows.
pub fn taped_euclidean_sq(tape: &mut Tape, q: NodeId, s: NodeId) -> NodeId {
    let d = tape.sub(q, s);
    let dt = tape.transpose(d);
    tape.matmul(d, dt)
}
