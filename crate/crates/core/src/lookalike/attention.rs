//! Inference-time forms of the look-alike towers.
//!
//! These are plain functions over borrowed matrices with no tape. Training
//! uses the batched graph in [`super::model`]; both must agree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::matrix::{cosine_similarity, dot, sigmoid, softmax_in_place};
use crate::numeric::tape::logistic_loss;
use crate::numeric::DenseMatrix;

/// Per-candidate seed centroids in look-alike space.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedsRepresentation {
    pub candidate_id: String,
    /// k × h, one row per cluster centroid.
    pub centroids: DenseMatrix,
    /// When the centroids were computed.
    pub version_ts: i64,
}

impl SeedsRepresentation {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

/// Weights of the global and local similarity in the serving score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombineWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CombineWeights {
    fn default() -> Self {
        Self { alpha: 0.3, beta: 0.7 }
    }
}

impl CombineWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::Argument(format!(
                "combine weights must be non-negative, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// Borrowed view of the shared transform: `relu(x · weight + bias)`.
#[derive(Debug, Clone, Copy)]
pub struct TransformParams<'a> {
    /// m × h
    pub weight: &'a DenseMatrix,
    /// length h
    pub bias: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct LocalAttentionParams<'a> {
    /// h × h
    pub w_l: &'a DenseMatrix,
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalAttentionParams<'a> {
    /// s_a × h
    pub w_g: &'a DenseMatrix,
    /// length s_a
    pub context: &'a [f64],
}

/// Pooled vector and the softmax weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub pooled: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn transform(universal: &[f64], params: TransformParams<'_>) -> Result<Vec<f64>> {
    let (m, h) = params.weight.shape();
    if universal.len() != m || params.bias.len() != h {
        return Err(Error::dim("transform", (1, universal.len()), (m, h)));
    }
    let mut out = params.bias.to_vec();
    for (i, &x) in universal.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(params.weight.row(i)) {
            *o += x * w;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(out)
}

fn weighted_rows(seeds: &DenseMatrix, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; seeds.cols()];
    for (row, &w) in seeds.row_iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    out
}

fn check_seeds(op: &'static str, seeds: &DenseMatrix, h: usize) -> Result<()> {
    if seeds.rows() == 0 {
        return Err(Error::Argument(format!("{op}: no seed centroids")));
    }
    if seeds.cols() != h {
        return Err(Error::dim(op, seeds.shape(), (seeds.rows(), h)));
    }
    Ok(())
}

/// Target-conditioned pooling: `softmax(tanh(E_s W_l e_u))` over centroids.
///
/// `E_s W_l` is formed first, so the cost is k·h² multiply-adds.
pub fn local_attention(seeds: &DenseMatrix, user: &[f64], params: LocalAttentionParams<'_>) -> Result<AttentionOutput> {
    let h = user.len();
    check_seeds("local_attention", seeds, h)?;
    if params.w_l.shape() != (h, h) {
        return Err(Error::dim("local_attention", params.w_l.shape(), (h, h)));
    }
    let mut row = vec![0.0; h];
    let mut weights: Vec<f64> = seeds
        .row_iter()
        .map(|e| {
            row.fill(0.0);
            for (&x, w) in e.iter().zip(params.w_l.row_iter()) {
                for (r, &v) in row.iter_mut().zip(w) {
                    *r += x * v;
                }
            }
            dot(&row, user).tanh()
        })
        .collect();
    softmax_in_place(&mut weights);
    Ok(AttentionOutput {
        pooled: weighted_rows(seeds, &weights),
        weights,
    })
}

/// [`local_attention`] given `E_s W_l` computed ahead of time. The projection
/// does not depend on the user, so it can be shared across requests.
pub fn local_attention_projected(
    seeds: &DenseMatrix,
    projected: &DenseMatrix,
    user: &[f64],
) -> Result<AttentionOutput> {
    check_seeds("local_attention", seeds, user.len())?;
    if projected.shape() != seeds.shape() {
        return Err(Error::dim("local_attention", projected.shape(), seeds.shape()));
    }
    let mut weights: Vec<f64> = projected.row_iter().map(|p| dot(p, user).tanh()).collect();
    softmax_in_place(&mut weights);
    Ok(AttentionOutput {
        pooled: weighted_rows(seeds, &weights),
        weights,
    })
}

/// Self-attention pooling: `softmax(w_g · tanh(W_g e_i))` over centroids.
pub fn global_attention(seeds: &DenseMatrix, params: GlobalAttentionParams<'_>) -> Result<AttentionOutput> {
    let (s_a, h) = params.w_g.shape();
    check_seeds("global_attention", seeds, h)?;
    if params.context.len() != s_a {
        return Err(Error::dim(
            "global_attention",
            params.w_g.shape(),
            (params.context.len(), 1),
        ));
    }
    let hidden = seeds.matmul_transpose_b(params.w_g)?;
    let mut weights: Vec<f64> = hidden
        .row_iter()
        .map(|r| r.iter().zip(params.context).map(|(x, c)| x.tanh() * c).sum())
        .collect();
    softmax_in_place(&mut weights);
    Ok(AttentionOutput {
        pooled: weighted_rows(seeds, &weights),
        weights,
    })
}

/// Unweighted mean of the centroids.
pub fn average_pooling(seeds: &DenseMatrix) -> Result<Vec<f64>> {
    if seeds.rows() == 0 {
        return Err(Error::Argument("average_pooling: no seed centroids".into()));
    }
    Ok(seeds.mean_row())
}

/// Global and local similarity plus their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub global_sim: f64,
    pub local_sim: f64,
    pub score: f64,
}

/// Cosine that treats a zero-norm seeds-side vector as dissimilar.
fn seeds_cosine(user: &[f64], pooled: &[f64]) -> Result<f64> {
    match cosine_similarity(user, pooled) {
        Ok(c) => Ok(c),
        Err(Error::DegenerateVector) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// `alpha · cos(e_u, E_global) + beta · cos(e_u, E_local)`.
///
/// `global` may be passed in when it has already been computed for the
/// candidate; it does not depend on the user.
pub fn combine_similarity(user: &[f64], global: &[f64], local: &[f64], weights: CombineWeights) -> Result<Similarity> {
    let global_sim = seeds_cosine(user, global)?;
    let local_sim = seeds_cosine(user, local)?;
    Ok(Similarity {
        global_sim,
        local_sim,
        score: weights.alpha * global_sim + weights.beta * local_sim,
    })
}

fn check_user(user_id: &str, user: &[f64]) -> Result<()> {
    let n = dot(user, user);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateUser(user_id.to_string()));
    }
    Ok(())
}

pub fn serving_score(
    user_id: &str,
    user: &[f64],
    seeds: &SeedsRepresentation,
    weights: CombineWeights,
    local: LocalAttentionParams<'_>,
    global: GlobalAttentionParams<'_>,
) -> Result<Similarity> {
    check_user(user_id, user)?;
    if seeds.k() == 0 {
        return Err(Error::NoSeeds(seeds.candidate_id.clone()));
    }
    let g = global_attention(&seeds.centroids, global)?;
    let l = local_attention(&seeds.centroids, user, local)?;
    combine_similarity(user, &g.pooled, &l.pooled, weights)
}

/// Serving score with a precomputed global vector.
pub fn serving_score_with_global(
    user_id: &str,
    user: &[f64],
    seeds: &SeedsRepresentation,
    global_pooled: &[f64],
    weights: CombineWeights,
    local: LocalAttentionParams<'_>,
) -> Result<Similarity> {
    check_user(user_id, user)?;
    if seeds.k() == 0 {
        return Err(Error::NoSeeds(seeds.candidate_id.clone()));
    }
    let l = local_attention(&seeds.centroids, user, local)?;
    combine_similarity(user, global_pooled, &l.pooled, weights)
}

/// Training-time logit: `(alpha·E_global + beta·E_local) · e_u + bias`.
pub fn training_logit(user: &[f64], global: &[f64], local: &[f64], weights: CombineWeights, bias: f64) -> f64 {
    user.iter()
        .zip(global.iter().zip(local))
        .map(|(u, (g, l))| u * (weights.alpha * g + weights.beta * l))
        .sum::<f64>()
        + bias
}

pub fn training_score(user: &[f64], global: &[f64], local: &[f64], weights: CombineWeights, bias: f64) -> f64 {
    sigmoid(training_logit(user, global, local, weights, bias))
}

/// Mean sigmoid cross-entropy from probabilities, evaluated through clamped logits.
pub fn lookalike_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::dim("lookalike_loss", (predictions.len(), 1), (labels.len(), 1)));
    }
    const LOGIT_CLAMP: f64 = 36.0;
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let z = (p.ln() - (-p).ln_1p()).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            logistic_loss(z, y)
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Mean sigmoid cross-entropy from logits.
pub fn lookalike_loss_from_logits(logits: &[f64], labels: &[f64]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| logistic_loss(z, y))
        .sum::<f64>()
        / logits.len().max(1) as f64
}
