//! The multi-field user tower: field embeddings, merge layer and MLP.

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{FieldKind, FieldSchema, FieldValue, Schema, UserRecord};
use crate::error::{Error, Result};
use crate::numeric::matrix::{log_sum_exp, softmax_in_place};
use crate::numeric::{dot, DenseMatrix, ParamId, ParameterSet, Tape, Var};
use crate::store::{params_from_bytes, params_to_bytes, read_required, write_atomic, Reader};

pub const MODEL_MAGIC: &[u8; 6] = b"RALMUR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Attention,
    Concat,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(MergeMode::Attention),
            "concat" => Ok(MergeMode::Concat),
            other => Err(Error::Config(format!(
                "unknown merge mode '{other}' (attention|concat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerConfig {
    /// Embedding width shared by every field and the output.
    pub m: usize,
    /// Attention-merge size.
    pub k_a: usize,
    /// Hidden ReLU layer widths.
    pub hidden: Vec<usize>,
    pub merge: MergeMode,
}

impl TowerConfig {
    /// Hidden layers `[4m, 2m]`.
    pub fn with_defaults(m: usize, k_a: usize, merge: MergeMode) -> Self {
        Self {
            m,
            k_a,
            hidden: vec![4 * m, 2 * m],
            merge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k_a == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "tower dims must be positive (m={}, k_a={}, hidden={:?})",
                self.m, self.k_a, self.hidden
            )));
        }
        Ok(())
    }
}

/// Parameter ids of a tower inside its [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct TowerLayout {
    pub schema: Schema,
    pub config: TowerConfig,
    pub fields: Vec<ParamId>,
    /// `(W₁, W₂)` in attention mode.
    pub merge: Option<(ParamId, ParamId)>,
    /// `(weight, bias)` per layer, the last one linear.
    pub mlp: Vec<(ParamId, ParamId)>,
}

impl TowerLayout {
    fn build<R: Rng + ?Sized>(
        schema: Schema,
        config: TowerConfig,
        params: &mut ParameterSet,
        rng: &mut R,
    ) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        let m = config.m;
        let fields = schema
            .fields
            .iter()
            .map(|f| {
                let rows = match f.kind {
                    FieldKind::Continuous => 1,
                    _ => f.vocabulary_size,
                };
                params.add(format!("field.{}", f.name), DenseMatrix::glorot(rows, m, rng))
            })
            .collect();
        let merge = match config.merge {
            MergeMode::Attention => Some((
                params.add("merge.w1", DenseMatrix::glorot(config.k_a, m, rng)),
                params.add("merge.w2", DenseMatrix::glorot(config.k_a, 1, rng)),
            )),
            MergeMode::Concat => None,
        };
        let mut width = match config.merge {
            MergeMode::Attention => m,
            MergeMode::Concat => m * schema.len(),
        };
        let mut mlp = Vec::new();
        for (i, &out) in config.hidden.iter().chain(std::iter::once(&m)).enumerate() {
            let w = params.add(format!("mlp.{i}.weight"), DenseMatrix::glorot(width, out, rng));
            let b = params.add(format!("mlp.{i}.bias"), DenseMatrix::zeros(1, out));
            mlp.push((w, b));
            width = out;
        }
        Ok(Self {
            schema,
            config,
            fields,
            merge,
            mlp,
        })
    }
}

/// Output of [`embed_field`]; `empty` marks a multivalent field with no values.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEmbedding {
    pub vector: Vec<f64>,
    pub empty: bool,
}

pub fn embed_field(value: &FieldValue, field: &FieldSchema, table: &DenseMatrix) -> Result<FieldEmbedding> {
    let row = |i: usize| -> Result<&[f64]> {
        if i >= table.rows() {
            return Err(Error::Schema(format!(
                "field '{}': index {i} out of range (vocabulary {})",
                field.name,
                table.rows()
            )));
        }
        Ok(table.row(i))
    };
    let (vector, empty) = match (field.kind, value) {
        (FieldKind::Univalent, FieldValue::Index(i)) => (row(*i)?.to_vec(), false),
        (FieldKind::Multivalent, FieldValue::Indices(is)) => {
            let mut v = vec![0.0; table.cols()];
            for &i in is {
                for (o, x) in v.iter_mut().zip(row(i)?) {
                    *o += x;
                }
            }
            if !is.is_empty() {
                let n = is.len() as f64;
                v.iter_mut().for_each(|o| *o /= n);
            }
            (v, is.is_empty())
        }
        (FieldKind::Continuous, FieldValue::Real(r)) => (row(0)?.iter().map(|w| r * w).collect(), false),
        _ => {
            return Err(Error::Schema(format!(
                "field '{}' expects a {:?} value, got {value:?}",
                field.name, field.kind
            )))
        }
    };
    Ok(FieldEmbedding { vector, empty })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutput {
    pub merged: Vec<f64>,
    /// Per-field weights, summing to 1.
    pub weights: Vec<f64>,
}

/// `sᵢ = W₂ · tanh(W₁ hᵢ)`, `a = softmax(s)`, `M = aH`.
pub fn attention_merge(h: &DenseMatrix, w1: &DenseMatrix, w2: &[f64]) -> Result<MergeOutput> {
    if h.rows() == 0 {
        return Err(Error::Argument("attention_merge: no fields".into()));
    }
    if w1.cols() != h.cols() || w2.len() != w1.rows() {
        return Err(Error::dim("attention_merge", h.shape(), w1.shape()));
    }
    let mut weights: Vec<f64> = h
        .row_iter()
        .map(|hi| w1.row_iter().zip(w2).map(|(wr, c)| c * dot(wr, hi).tanh()).sum())
        .collect();
    softmax_in_place(&mut weights);
    let mut merged = vec![0.0; h.cols()];
    for (hi, a) in h.row_iter().zip(&weights) {
        for (o, x) in merged.iter_mut().zip(hi) {
            *o += a * x;
        }
    }
    Ok(MergeOutput { merged, weights })
}

/// Row-major concatenation of the field vectors.
pub fn concat_merge(h: &DenseMatrix) -> Vec<f64> {
    h.as_slice().to_vec()
}

/// `-log softmax` of the positive among `{positive} ∪ negatives`.
pub fn representation_loss(user: &[f64], positive: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(dot(user, positive));
    logits.extend(negatives.iter().map(|x| dot(user, x)));
    log_sum_exp(&logits) - logits[0]
}

#[derive(Debug, Clone)]
pub struct RepresentationModel {
    pub layout: TowerLayout,
    pub params: ParameterSet,
}

impl RepresentationModel {
    pub fn new<R: Rng + ?Sized>(schema: Schema, config: TowerConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParameterSet::new();
        let layout = TowerLayout::build(schema, config, &mut params, rng)?;
        Ok(Self { layout, params })
    }

    pub fn m(&self) -> usize {
        self.layout.config.m
    }

    /// Field embedding matrix H (n × m) of one user.
    pub fn field_matrix(&self, record: &UserRecord) -> Result<DenseMatrix> {
        let schema = &self.layout.schema;
        if record.fields.len() != schema.len() {
            return Err(Error::Schema(format!(
                "user '{}' has {} fields, schema has {}",
                record.user_id,
                record.fields.len(),
                schema.len()
            )));
        }
        let mut h = DenseMatrix::zeros(schema.len(), self.m());
        for (i, (f, v)) in schema.fields.iter().zip(&record.fields).enumerate() {
            let e = embed_field(v, f, self.params.value(self.layout.fields[i]))?;
            h.row_mut(i).copy_from_slice(&e.vector);
        }
        Ok(h)
    }

    /// Universal embedding of one user.
    pub fn user_embedding(&self, record: &UserRecord) -> Result<Vec<f64>> {
        let h = self.field_matrix(record)?;
        let mut x = match self.layout.merge {
            Some((w1, w2)) => attention_merge(&h, self.params.value(w1), self.params.value(w2).as_slice())?.merged,
            None => concat_merge(&h),
        };
        let last = self.layout.mlp.len() - 1;
        for (i, &(w, b)) in self.layout.mlp.iter().enumerate() {
            let wm = self.params.value(w);
            let mut out = self.params.value(b).as_slice().to_vec();
            for (xi, wr) in x.iter().zip(wm.row_iter()) {
                if *xi == 0.0 {
                    continue;
                }
                for (o, wv) in out.iter_mut().zip(wr) {
                    *o += xi * wv;
                }
            }
            if i != last {
                out.iter_mut().for_each(|o| *o = o.max(0.0));
            }
            x = out;
        }
        Ok(x)
    }

    /// Tower output for a batch of users on the tape (B × m).
    pub fn forward_users(&self, tape: &mut Tape, records: &[&UserRecord]) -> Result<Var> {
        forward_users(&self.layout, &self.params, tape, records)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut cfg =
            serde_json::to_vec(&(&self.layout.schema, &self.layout.config)).expect("schema and config serialise");
        cfg.shrink_to_fit();
        let mut blob = Vec::with_capacity(cfg.len() + 4);
        blob.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        blob.extend_from_slice(&cfg);
        params_to_bytes(MODEL_MAGIC, &blob, &self.params)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (blob, params) = params_from_bytes(MODEL_MAGIC, bytes, origin)?;
        let mut r = Reader::new(&blob, origin);
        let n = r.u32()? as usize;
        let (schema, config): (Schema, TowerConfig) =
            serde_json::from_slice(r.take(n)?).map_err(|e| Error::format(origin, e.to_string()))?;
        // Rebuild the layout to recover ids, then check names and shapes.
        let mut fresh = ParameterSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let layout = TowerLayout::build(schema, config, &mut fresh, &mut rng)?;
        if fresh.len() != params.len() {
            return Err(Error::format(
                origin,
                format!("expected {} parameters, found {}", fresh.len(), params.len()),
            ));
        }
        for id in fresh.ids() {
            if fresh.name(id) != params.name(id) || fresh.value(id).shape() != params.value(id).shape() {
                return Err(Error::format(
                    origin,
                    format!("unexpected parameter {}", params.name(id)),
                ));
            }
        }
        Ok(Self { layout, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_required(path)?, path)
    }
}

/// Batched tower on the tape.
pub fn forward_users(
    layout: &TowerLayout,
    params: &ParameterSet,
    tape: &mut Tape,
    records: &[&UserRecord],
) -> Result<Var> {
    let schema = &layout.schema;
    let m = layout.config.m;
    let b = records.len();
    let mut field_vars = Vec::with_capacity(schema.len());
    for (fi, f) in schema.fields.iter().enumerate() {
        let table = tape.param(params, layout.fields[fi]);
        let values = records.iter().map(|r| {
            r.fields
                .get(fi)
                .ok_or_else(|| Error::Schema(format!("user '{}' lacks field '{}'", r.user_id, f.name)))
        });
        let v = match f.kind {
            FieldKind::Univalent => {
                let idx = values
                    .map(|v| match v? {
                        FieldValue::Index(i) => Ok(*i),
                        other => Err(Error::Schema(format!("field '{}' got {other:?}", f.name))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.gather_rows(table, idx)?
            }
            FieldKind::Multivalent => {
                let groups = values
                    .map(|v| match v? {
                        FieldValue::Indices(is) => Ok(is.clone()),
                        other => Err(Error::Schema(format!("field '{}' got {other:?}", f.name))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.group_mean(table, groups)?
            }
            FieldKind::Continuous => {
                let col = values
                    .map(|v| match v? {
                        FieldValue::Real(r) => Ok(*r),
                        other => Err(Error::Schema(format!("field '{}' got {other:?}", f.name))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let c = tape.constant(DenseMatrix::column_vector(&col));
                tape.matmul(c, table)?
            }
        };
        field_vars.push(v);
    }
    let mut x = match layout.merge {
        Some((w1, w2)) => {
            let w1 = tape.param(params, w1);
            let w2 = tape.param(params, w2);
            let mut scores = Vec::with_capacity(field_vars.len());
            for &h in &field_vars {
                let u = tape.matmul_transpose_b(h, w1)?;
                let u = tape.tanh(u);
                scores.push(tape.matmul(u, w2)?);
            }
            let s = tape.hconcat(scores)?;
            let a = tape.softmax_rows(s);
            let mut merged: Option<Var> = None;
            for (fi, &h) in field_vars.iter().enumerate() {
                let af = tape.column(a, fi)?;
                let term = tape.mul_col(h, af)?;
                merged = Some(match merged {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            merged.expect("schema has at least one field")
        }
        None => tape.hconcat(field_vars)?,
    };
    debug_assert_eq!(tape.value(x).rows(), b);
    let last = layout.mlp.len() - 1;
    for (i, &(w, bias)) in layout.mlp.iter().enumerate() {
        let w = tape.param(params, w);
        let bias = tape.param(params, bias);
        let xw = tape.matmul(x, w)?;
        x = tape.add_row(xw, bias)?;
        if i != last {
            x = tape.relu(x);
        }
    }
    debug_assert_eq!(tape.value(x).cols(), m);
    Ok(x)
}

/// Sampled-softmax loss of a batch. `items[b]` lists the positive first,
/// then the negatives, as rows of the `items` table.
pub fn batch_loss(
    layout: &TowerLayout,
    params: &ParameterSet,
    item_table: ParamId,
    tape: &mut Tape,
    records: &[&UserRecord],
    items: &[Vec<usize>],
) -> Result<Var> {
    if records.is_empty() || records.len() != items.len() {
        return Err(Error::Argument(format!(
            "batch has {} users and {} item lists",
            records.len(),
            items.len()
        )));
    }
    let width = items[0].len();
    if width < 2 || items.iter().any(|l| l.len() != width) {
        return Err(Error::Argument(
            "every example needs the same number (≥ 2) of items".into(),
        ));
    }
    let users = forward_users(layout, params, tape, records)?;
    let table = tape.param(params, item_table);
    let flat: Vec<usize> = items.iter().flatten().copied().collect();
    let x = tape.gather_rows(table, flat)?;
    let rep: Vec<usize> = (0..records.len()).flat_map(|b| std::iter::repeat_n(b, width)).collect();
    let u = tape.gather_rows(users, rep)?;
    let prod = tape.mul(x, u)?;
    let logits = tape.row_sum(prod);
    let logits = tape.reshape(logits, records.len(), width)?;
    tape.softmax_cross_entropy(logits, vec![0; records.len()])
}

/// Adds an item table to `params` and returns its id.
pub fn add_item_table<R: Rng + ?Sized>(params: &mut ParameterSet, items: usize, m: usize, rng: &mut R) -> ParamId {
    params.add("items", DenseMatrix::glorot(items, m, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FieldSchema;
    use crate::numeric::{finite_difference_check, GradCheckOptions};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> Schema {
        Schema::new(vec![
            FieldSchema {
                field_id: 0,
                name: "tags".into(),
                kind: FieldKind::Multivalent,
                vocabulary_size: 6,
            },
            FieldSchema {
                field_id: 1,
                name: "age".into(),
                kind: FieldKind::Univalent,
                vocabulary_size: 4,
            },
            FieldSchema {
                field_id: 2,
                name: "region".into(),
                kind: FieldKind::Univalent,
                vocabulary_size: 3,
            },
            FieldSchema {
                field_id: 3,
                name: "activity".into(),
                kind: FieldKind::Continuous,
                vocabulary_size: 0,
            },
        ])
        .unwrap()
    }

    fn users() -> Vec<UserRecord> {
        let mk = |id: &str, tags: Vec<usize>, age, region, act| UserRecord {
            user_id: id.into(),
            fields: vec![
                FieldValue::Indices(tags),
                FieldValue::Index(age),
                FieldValue::Index(region),
                FieldValue::Real(act),
            ],
        };
        vec![
            mk("a", vec![0, 3], 1, 2, 0.3),
            mk("b", vec![], 0, 0, 0.9),
            mk("c", vec![5], 3, 1, 0.0),
        ]
    }

    #[test]
    fn embed_field_examples() {
        let table = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let uni = FieldSchema {
            field_id: 0,
            name: "u".into(),
            kind: FieldKind::Univalent,
            vocabulary_size: 4,
        };
        let multi = FieldSchema {
            kind: FieldKind::Multivalent,
            ..uni.clone()
        };
        assert_eq!(
            embed_field(&FieldValue::Index(3), &uni, &table).unwrap().vector,
            vec![7.0, 8.0]
        );
        assert_eq!(
            embed_field(&FieldValue::Indices(vec![3]), &multi, &table)
                .unwrap()
                .vector,
            vec![7.0, 8.0]
        );
        assert_eq!(
            embed_field(&FieldValue::Indices(vec![0, 2]), &multi, &table)
                .unwrap()
                .vector,
            vec![3.0, 4.0]
        );
        assert_eq!(
            embed_field(&FieldValue::Indices(vec![2, 0]), &multi, &table).unwrap(),
            embed_field(&FieldValue::Indices(vec![0, 2]), &multi, &table).unwrap()
        );
        let empty = embed_field(&FieldValue::Indices(vec![]), &multi, &table).unwrap();
        assert!(empty.empty);
        assert_eq!(empty.vector, vec![0.0, 0.0]);
        assert!(matches!(
            embed_field(&FieldValue::Index(4), &uni, &table),
            Err(Error::Schema(_))
        ));
        let cont = FieldSchema {
            kind: FieldKind::Continuous,
            ..uni
        };
        let proj = DenseMatrix::row_vector(&[2.0, -1.0]);
        assert_eq!(
            embed_field(&FieldValue::Real(0.5), &cont, &proj).unwrap().vector,
            vec![1.0, -0.5]
        );
    }

    #[test]
    fn attention_merge_examples() {
        let w1 = DenseMatrix::from_rows(&[&[0.5, -1.0], &[2.0, 0.3], &[0.1, 0.1]]).unwrap();
        let w2 = [1.0, -0.5, 2.0];
        let one = DenseMatrix::row_vector(&[0.7, -0.2]);
        let out = attention_merge(&one, &w1, &w2).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert_eq!(out.merged, vec![0.7, -0.2]);
        let same = DenseMatrix::from_rows(&[&[0.7, -0.2], &[0.7, -0.2], &[0.7, -0.2]]).unwrap();
        let out = attention_merge(&same, &w1, &w2).unwrap();
        for a in &out.weights {
            assert_abs_diff_eq!(*a, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn attention_merge_scripted_two_fields() {
        // W₁ = [[1,0],[0,1]], W₂ = [1, 2], h₁ = (1, 0), h₂ = (0, 1).
        let w1 = DenseMatrix::identity(2);
        let w2 = [1.0, 2.0];
        let h = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let s1 = 1.0 * 1f64.tanh() + 2.0 * 0f64.tanh();
        let s2 = 1.0 * 0f64.tanh() + 2.0 * 1f64.tanh();
        let a1 = s1.exp() / (s1.exp() + s2.exp());
        let out = attention_merge(&h, &w1, &w2).unwrap();
        assert_abs_diff_eq!(out.weights[0], a1, epsilon = 1e-15);
        assert_abs_diff_eq!(out.weights[1], 1.0 - a1, epsilon = 1e-15);
        assert_abs_diff_eq!(out.merged[0], a1, epsilon = 1e-15);
        assert_abs_diff_eq!(out.merged[1], 1.0 - a1, epsilon = 1e-15);
    }

    #[test]
    fn concat_merge_examples() {
        let h = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(concat_merge(&h), vec![1.0, 2.0, 3.0, 4.0]);
        let one = DenseMatrix::row_vector(&[5.0, 6.0]);
        assert_eq!(concat_merge(&one), vec![5.0, 6.0]);
    }

    #[test]
    fn loss_examples() {
        let x = [0.3, 0.4];
        assert_abs_diff_eq!(representation_loss(&x, &x, &[&x]), 2f64.ln(), epsilon = 1e-15);
        let l = representation_loss(&[1.0, 0.0], &[1.0, 0.0], &[&[0.0, 1.0]]);
        assert_abs_diff_eq!(l, (1.0 + (-1f64).exp()).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(l, 0.31326168751822286, epsilon = 1e-12);
        assert!(representation_loss(&[50.0], &[50.0], &[&[-50.0]]) < 1e-300);
    }

    #[test]
    fn merge_modes_agree_for_single_field() {
        let s = Schema::new(vec![FieldSchema {
            field_id: 0,
            name: "age".into(),
            kind: FieldKind::Univalent,
            vocabulary_size: 4,
        }])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = RepresentationModel::new(
            s.clone(),
            TowerConfig::with_defaults(4, 3, MergeMode::Attention),
            &mut rng,
        )
        .unwrap();
        let mut cat =
            RepresentationModel::new(s, TowerConfig::with_defaults(4, 3, MergeMode::Concat), &mut rng).unwrap();
        for ((id_c, _, pc), (_, _, pa)) in cat
            .params
            .clone()
            .iter()
            .zip(att.params.iter().filter(|(_, n, _)| !n.starts_with("merge.")))
        {
            cat.params.get_mut(id_c).value = pa.value.clone();
            assert_eq!(pc.shape(), pa.shape());
        }
        let r = UserRecord {
            user_id: "x".into(),
            fields: vec![FieldValue::Index(2)],
        };
        assert_eq!(att.user_embedding(&r).unwrap(), cat.user_embedding(&r).unwrap());
    }

    #[test]
    fn tape_tower_matches_pure_forward() {
        for merge in [MergeMode::Attention, MergeMode::Concat] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let model = RepresentationModel::new(schema(), TowerConfig::with_defaults(4, 3, merge), &mut rng).unwrap();
            let us = users();
            let refs: Vec<&UserRecord> = us.iter().collect();
            let mut tape = Tape::new();
            let out = model.forward_users(&mut tape, &refs).unwrap();
            for (i, u) in us.iter().enumerate() {
                let want = model.user_embedding(u).unwrap();
                for (a, b) in tape.value(out).row(i).iter().zip(&want) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
                assert_eq!(model.user_embedding(u).unwrap(), want);
            }
        }
    }

    #[test]
    fn batch_loss_gradients_match_finite_differences() {
        for merge in [MergeMode::Attention, MergeMode::Concat] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut model =
                RepresentationModel::new(schema(), TowerConfig::with_defaults(8, 4, merge), &mut rng).unwrap();
            let items = add_item_table(&mut model.params, 7, 8, &mut rng);
            let us = users();
            let refs: Vec<&UserRecord> = us.iter().collect();
            let lists = vec![vec![0, 3, 4], vec![2, 1, 6], vec![5, 0, 3]];
            let layout = model.layout.clone();
            let report = finite_difference_check(
                &model.params,
                |p, t| batch_loss(&layout, p, items, t, &refs, &lists),
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "{merge:?}: {report:?}");
        }
    }

    #[test]
    fn model_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = RepresentationModel::new(
            schema(),
            TowerConfig::with_defaults(4, 2, MergeMode::Attention),
            &mut rng,
        )
        .unwrap();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..6], b"RALMUR");
        let back = RepresentationModel::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.layout, model.layout);
    }
}
