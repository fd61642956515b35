//! Look-alike parameters, batched training graph and model file.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{
    average_pooling, combine_similarity, global_attention, local_attention, serving_score, training_logit,
    CombineWeights, GlobalAttentionParams, LocalAttentionParams, SeedsRepresentation, Similarity, TransformParams,
};
use crate::error::{Error, Result};
use crate::numeric::{DenseMatrix, ParamId, ParameterSet, Tape, Var};
use crate::store::{params_from_bytes, params_to_bytes, read_required, write_atomic, Reader};

pub const MODEL_MAGIC: &[u8; 6] = b"RALMLK";

/// How seed centroids are pooled into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Global and local attention units.
    #[default]
    Attention,
    /// Unweighted centroid mean in place of both units.
    Average,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Pooling::Attention),
            "average" => Ok(Pooling::Average),
            other => Err(Error::Config(format!("unknown pooling '{other}' (attention|average)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookalikeConfig {
    /// Universal embedding width.
    pub m: usize,
    /// Look-alike embedding width.
    pub h: usize,
    /// Attention-merge size of the representation model the inputs came from.
    pub k_a: usize,
    /// Global attention size.
    pub s_a: usize,
    pub weights: CombineWeights,
    pub pooling: Pooling,
}

impl LookalikeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.h == 0 || self.s_a == 0 {
            return Err(Error::Config(format!(
                "look-alike dims must be positive (m={}, h={}, s_a={})",
                self.m, self.h, self.s_a
            )));
        }
        CombineWeights::new(self.weights.alpha, self.weights.beta)?;
        Ok(())
    }
}

pub(crate) const TRANSFORM_W: ParamId = ParamId(0);
pub(crate) const TRANSFORM_B: ParamId = ParamId(1);
pub(crate) const LOCAL_W: ParamId = ParamId(2);
pub(crate) const GLOBAL_W: ParamId = ParamId(3);
pub(crate) const GLOBAL_CONTEXT: ParamId = ParamId(4);
pub(crate) const LOGIT_BIAS: ParamId = ParamId(5);

const PARAM_NAMES: [&str; 6] = [
    "transform.weight",
    "transform.bias",
    "local.w_l",
    "global.w_g",
    "global.context",
    "logit_bias",
];

/// One labelled (candidate, user) pair; indices refer to the batch inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookalikeSample {
    pub candidate: usize,
    pub user: usize,
    pub label: f64,
}

/// Inputs of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LookalikeBatch<'a> {
    /// Universal embeddings, one row per user.
    pub universal: &'a DenseMatrix,
    /// Per candidate, the cluster memberships of its seeds as universal rows.
    pub clusters: &'a [Vec<Vec<usize>>],
    pub samples: &'a [LookalikeSample],
}

#[derive(Debug, Clone)]
pub struct LookalikeModel {
    pub config: LookalikeConfig,
    pub params: ParameterSet,
}

impl LookalikeModel {
    pub fn new<R: Rng + ?Sized>(config: LookalikeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (m, h, s) = (config.m, config.h, config.s_a);
        let mut params = ParameterSet::new();
        params.add(PARAM_NAMES[0], DenseMatrix::glorot(m, h, rng));
        params.add(PARAM_NAMES[1], DenseMatrix::zeros(1, h));
        params.add(PARAM_NAMES[2], DenseMatrix::glorot(h, h, rng));
        params.add(PARAM_NAMES[3], DenseMatrix::glorot(s, h, rng));
        params.add(PARAM_NAMES[4], DenseMatrix::glorot(s, 1, rng));
        params.add(PARAM_NAMES[5], DenseMatrix::zeros(1, 1));
        Ok(Self { config, params })
    }

    pub fn transform_params(&self) -> TransformParams<'_> {
        TransformParams {
            weight: self.params.value(TRANSFORM_W),
            bias: self.params.value(TRANSFORM_B).as_slice(),
        }
    }

    pub fn local_params(&self) -> LocalAttentionParams<'_> {
        LocalAttentionParams {
            w_l: self.params.value(LOCAL_W),
        }
    }

    pub fn global_params(&self) -> GlobalAttentionParams<'_> {
        GlobalAttentionParams {
            w_g: self.params.value(GLOBAL_W),
            context: self.params.value(GLOBAL_CONTEXT).as_slice(),
        }
    }

    pub fn logit_bias(&self) -> f64 {
        self.params.value(LOGIT_BIAS).get(0, 0)
    }

    pub fn set_logit_bias(&mut self, value: f64) {
        self.params.get_mut(LOGIT_BIAS).value.set(0, 0, value);
    }

    /// Look-alike embeddings for every row of `universal`.
    pub fn embed_all(&self, universal: &DenseMatrix) -> Result<DenseMatrix> {
        if universal.cols() != self.config.m {
            return Err(Error::dim(
                "embed_all",
                universal.shape(),
                (universal.rows(), self.config.m),
            ));
        }
        let mut out = universal.matmul(self.params.value(TRANSFORM_W))?;
        let b = self.params.value(TRANSFORM_B).as_slice();
        for r in 0..out.rows() {
            for (x, bb) in out.row_mut(r).iter_mut().zip(b) {
                *x = (*x + bb).max(0.0);
            }
        }
        Ok(out)
    }

    /// The user-independent pooled vector of a candidate.
    pub fn global_vector(&self, centroids: &DenseMatrix) -> Result<Vec<f64>> {
        match self.config.pooling {
            Pooling::Attention => Ok(global_attention(centroids, self.global_params())?.pooled),
            Pooling::Average => average_pooling(centroids),
        }
    }

    pub fn local_vector(&self, centroids: &DenseMatrix, user: &[f64]) -> Result<Vec<f64>> {
        match self.config.pooling {
            Pooling::Attention => Ok(local_attention(centroids, user, self.local_params())?.pooled),
            Pooling::Average => average_pooling(centroids),
        }
    }

    /// Serving similarity under this model's pooling.
    pub fn score(&self, user_id: &str, user: &[f64], seeds: &SeedsRepresentation) -> Result<Similarity> {
        match self.config.pooling {
            Pooling::Attention => serving_score(
                user_id,
                user,
                seeds,
                self.config.weights,
                self.local_params(),
                self.global_params(),
            ),
            Pooling::Average => {
                if seeds.k() == 0 {
                    return Err(Error::NoSeeds(seeds.candidate_id.clone()));
                }
                if user.iter().all(|&x| x == 0.0) {
                    return Err(Error::DegenerateUser(user_id.to_string()));
                }
                let mean = average_pooling(&seeds.centroids)?;
                combine_similarity(user, &mean, &mean, self.config.weights)
            }
        }
    }

    /// Score with a global vector computed earlier by [`Self::global_vector`].
    pub fn score_with_global(
        &self,
        user_id: &str,
        user: &[f64],
        seeds: &SeedsRepresentation,
        global: &[f64],
    ) -> Result<Similarity> {
        if seeds.k() == 0 {
            return Err(Error::NoSeeds(seeds.candidate_id.clone()));
        }
        if user.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateUser(user_id.to_string()));
        }
        let local = match self.config.pooling {
            Pooling::Attention => local_attention(&seeds.centroids, user, self.local_params())?.pooled,
            Pooling::Average => global.to_vec(),
        };
        combine_similarity(user, global, &local, self.config.weights)
    }

    /// Training logit for one user against one candidate's centroids.
    pub fn logit(&self, user: &[f64], centroids: &DenseMatrix) -> Result<f64> {
        let g = self.global_vector(centroids)?;
        let l = self.local_vector(centroids, user)?;
        Ok(training_logit(user, &g, &l, self.config.weights, self.logit_bias()))
    }

    pub fn forward_batch(&self, tape: &mut Tape, batch: &LookalikeBatch<'_>) -> Result<(Var, Var)> {
        forward_batch(&self.config, &self.params, tape, batch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut cfg = Vec::with_capacity(33);
        for d in [self.config.m, self.config.h, self.config.k_a, self.config.s_a] {
            cfg.extend_from_slice(&(d as u32).to_le_bytes());
        }
        cfg.extend_from_slice(&self.config.weights.alpha.to_le_bytes());
        cfg.extend_from_slice(&self.config.weights.beta.to_le_bytes());
        cfg.push(match self.config.pooling {
            Pooling::Attention => 0,
            Pooling::Average => 1,
        });
        params_to_bytes(MODEL_MAGIC, &cfg, &self.params)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (cfg, params) = params_from_bytes(MODEL_MAGIC, bytes, origin)?;
        let mut r = Reader::new(&cfg, origin);
        let m = r.u32()? as usize;
        let h = r.u32()? as usize;
        let k_a = r.u32()? as usize;
        let s_a = r.u32()? as usize;
        let alpha = r.f64()?;
        let beta = r.f64()?;
        let pooling = match r.u8()? {
            0 => Pooling::Attention,
            1 => Pooling::Average,
            t => return Err(Error::format(origin, format!("unknown pooling tag {t}"))),
        };
        let config = LookalikeConfig {
            m,
            h,
            k_a,
            s_a,
            weights: CombineWeights { alpha, beta },
            pooling,
        };
        config.validate()?;
        let expected = [(m, h), (1, h), (h, h), (s_a, h), (s_a, 1), (1, 1)];
        if params.len() != expected.len() {
            return Err(Error::format(
                origin,
                format!("expected 6 parameters, found {}", params.len()),
            ));
        }
        for (id, (name, shape)) in params.ids().zip(PARAM_NAMES.iter().zip(expected)) {
            if params.name(id) != *name || params.value(id).shape() != shape {
                return Err(Error::format(
                    origin,
                    format!(
                        "parameter {} has shape {:?}, expected {name} {:?}",
                        params.name(id),
                        params.value(id).shape(),
                        shape
                    ),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_required(path)?, path)
    }
}

/// Builds the batched graph and returns `(mean loss, logits)`.
///
/// Only the users referenced by the batch are transformed. Centroids are
/// group means of transformed seeds, so gradients reach the transform
/// through both towers.
pub fn forward_batch(
    config: &LookalikeConfig,
    params: &ParameterSet,
    tape: &mut Tape,
    batch: &LookalikeBatch<'_>,
) -> Result<(Var, Var)> {
    if batch.samples.is_empty() {
        return Err(Error::Argument("empty look-alike batch".into()));
    }
    let mut local_of: HashMap<usize, usize> = HashMap::new();
    let mut rows: Vec<usize> = Vec::new();
    let mut local = |u: usize, rows: &mut Vec<usize>| -> usize {
        *local_of.entry(u).or_insert_with(|| {
            rows.push(u);
            rows.len() - 1
        })
    };

    // Candidates in first-appearance order.
    let mut cand_slot: HashMap<usize, usize> = HashMap::new();
    let mut cands: Vec<usize> = Vec::new();
    for s in batch.samples {
        let c = *batch
            .clusters
            .get(s.candidate)
            .map(|_| &s.candidate)
            .ok_or_else(|| Error::Argument(format!("sample candidate {} out of range", s.candidate)))?;
        cand_slot.entry(c).or_insert_with(|| {
            cands.push(c);
            cands.len() - 1
        });
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut lens: Vec<usize> = Vec::with_capacity(cands.len());
    let mut offsets: Vec<usize> = Vec::with_capacity(cands.len());
    for &c in &cands {
        let clusters = &batch.clusters[c];
        if clusters.is_empty() {
            return Err(Error::NoSeeds(format!("candidate #{c}")));
        }
        offsets.push(groups.len());
        lens.push(clusters.len());
        for g in clusters {
            groups.push(g.iter().map(|&u| local(u, &mut rows)).collect());
        }
    }
    let sample_users: Vec<usize> = batch.samples.iter().map(|s| local(s.user, &mut rows)).collect();
    if let Some(&bad) = rows.iter().find(|&&u| u >= batch.universal.rows()) {
        return Err(Error::Argument(format!("user row {bad} out of range")));
    }

    let x = tape.constant(batch.universal.select_rows(&rows));
    let w = tape.param(params, TRANSFORM_W);
    let b = tape.param(params, TRANSFORM_B);
    let xw = tape.matmul(x, w)?;
    let pre = tape.add_row(xw, b)?;
    let t = tape.relu(pre);
    let centroids = tape.group_mean(t, groups)?;
    let sample_cand: Vec<usize> = batch.samples.iter().map(|s| cand_slot[&s.candidate]).collect();
    let users = tape.gather_rows(t, sample_users.clone())?;
    let alpha = config.weights.alpha;
    let beta = config.weights.beta;

    let pooled = match config.pooling {
        Pooling::Average => {
            let groups: Vec<Vec<usize>> = offsets.iter().zip(&lens).map(|(&o, &l)| (o..o + l).collect()).collect();
            let mean = tape.group_mean(centroids, groups)?;
            let per_sample = tape.gather_rows(mean, sample_cand)?;
            tape.scale(per_sample, alpha + beta)
        }
        Pooling::Attention => {
            let wg = tape.param(params, GLOBAL_W);
            let ctx = tape.param(params, GLOBAL_CONTEXT);
            let hidden = tape.matmul_transpose_b(centroids, wg)?;
            let hidden = tape.tanh(hidden);
            let g_scores = tape.matmul(hidden, ctx)?;
            let g_weights = tape.segment_softmax(g_scores, lens.clone())?;
            let g_weighted = tape.mul_col(centroids, g_weights)?;
            let global = tape.segment_sum(g_weighted, lens.clone())?;
            let global = tape.gather_rows(global, sample_cand.clone())?;

            let wl = tape.param(params, LOCAL_W);
            let projected = tape.matmul(centroids, wl)?;
            let mut centroid_rows = Vec::new();
            let mut user_rows = Vec::new();
            let mut sample_lens = Vec::with_capacity(batch.samples.len());
            for (i, &c) in sample_cand.iter().enumerate() {
                let (o, l) = (offsets[c], lens[c]);
                centroid_rows.extend(o..o + l);
                user_rows.extend(std::iter::repeat_n(sample_users[i], l));
                sample_lens.push(l);
            }
            let p = tape.gather_rows(projected, centroid_rows.clone())?;
            let u_rep = tape.gather_rows(t, user_rows)?;
            let pu = tape.mul(p, u_rep)?;
            let l_scores = tape.row_sum(pu);
            let l_scores = tape.tanh(l_scores);
            let l_weights = tape.segment_softmax(l_scores, sample_lens.clone())?;
            let seeds = tape.gather_rows(centroids, centroid_rows)?;
            let l_weighted = tape.mul_col(seeds, l_weights)?;
            let local = tape.segment_sum(l_weighted, sample_lens)?;

            let g = tape.scale(global, alpha);
            let l = tape.scale(local, beta);
            tape.add(g, l)?
        }
    };
    let prod = tape.mul(pooled, users)?;
    let dots = tape.row_sum(prod);
    let bias = tape.param(params, LOGIT_BIAS);
    let logits = tape.add_row(dots, bias)?;
    let labels: Vec<f64> = batch.samples.iter().map(|s| s.label).collect();
    let loss = tape.sigmoid_cross_entropy(logits, labels)?;
    Ok((loss, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_difference_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(pooling: Pooling) -> (LookalikeModel, DenseMatrix, Vec<Vec<Vec<usize>>>, Vec<LookalikeSample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = LookalikeConfig {
            m: 8,
            h: 8,
            k_a: 4,
            s_a: 5,
            weights: CombineWeights::default(),
            pooling,
        };
        let model = LookalikeModel::new(config, &mut rng).unwrap();
        let universal = DenseMatrix::glorot(12, 8, &mut rng).map(|x| x * 3.0);
        let clusters = vec![vec![vec![0, 1], vec![2], vec![3, 4, 5]], vec![vec![6], vec![7, 8]]];
        let samples = vec![
            LookalikeSample {
                candidate: 0,
                user: 1,
                label: 1.0,
            },
            LookalikeSample {
                candidate: 0,
                user: 9,
                label: 0.0,
            },
            LookalikeSample {
                candidate: 1,
                user: 7,
                label: 1.0,
            },
            LookalikeSample {
                candidate: 1,
                user: 10,
                label: 0.0,
            },
            LookalikeSample {
                candidate: 0,
                user: 11,
                label: 0.0,
            },
        ];
        (model, universal, clusters, samples)
    }

    #[test]
    fn batched_logits_match_pure_functions() {
        for pooling in [Pooling::Attention, Pooling::Average] {
            let (mut model, universal, clusters, samples) = toy(pooling);
            model.params.get_mut(LOGIT_BIAS).value.set(0, 0, -0.3);
            let batch = LookalikeBatch {
                universal: &universal,
                clusters: &clusters,
                samples: &samples,
            };
            let mut tape = Tape::new();
            let (_, logits) = model.forward_batch(&mut tape, &batch).unwrap();
            let emb = model.embed_all(&universal).unwrap();
            for (i, s) in samples.iter().enumerate() {
                let groups = &clusters[s.candidate];
                let centroids = DenseMatrix::from_rows(
                    &groups
                        .iter()
                        .map(|g| emb.select_rows(g).mean_row())
                        .collect::<Vec<_>>()
                        .iter()
                        .map(|v| v.as_slice())
                        .collect::<Vec<_>>(),
                )
                .unwrap();
                let want = model.logit(emb.row(s.user), &centroids).unwrap();
                let got = tape.value(logits).get(i, 0);
                assert!((want - got).abs() < 1e-12, "{pooling:?} sample {i}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for pooling in [Pooling::Attention, Pooling::Average] {
            let (model, universal, clusters, samples) = toy(pooling);
            let batch = LookalikeBatch {
                universal: &universal,
                clusters: &clusters,
                samples: &samples,
            };
            let cfg = model.config;
            let report = finite_difference_check(
                &model.params,
                |p, t| Ok(forward_batch(&cfg, p, t, &batch)?.0),
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "{pooling:?}: {report:?}");
        }
    }

    #[test]
    fn model_file_roundtrip() {
        let (model, ..) = toy(Pooling::Average);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).unwrap();
        let back = LookalikeModel::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.to_bytes(), model.to_bytes());
        assert_eq!(&back.to_bytes()[..6], b"RALMLK");
        let mut bad = model.to_bytes();
        bad[0] = b'X';
        assert!(LookalikeModel::from_bytes(&bad, &path).is_err());
    }
}
