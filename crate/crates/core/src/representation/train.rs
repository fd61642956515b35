//! Phase-1 training loop.

use std::collections::hash_map::Entry;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{
    build_examples, build_training_batches, collect_positives, NegativeSampler, SamplingLimits, TrainingExample,
};
use super::tower::{add_item_table, batch_loss, RepresentationModel, TowerConfig};
use crate::data::{Event, Schema, UserRecord, UserSplit};
use crate::error::{Error, Result};
use crate::evalgen::metrics::auc;
use crate::numeric::{dot, norm, AdamConfig, DenseMatrix, ParamId, ParameterSet, Tape};
use crate::store::{write_atomic, EmbeddingSpace, EmbeddingStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationTrainConfig {
    pub tower: TowerConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_positives: usize,
    pub negatives: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl RepresentationTrainConfig {
    pub fn new(tower: TowerConfig, seed: u64) -> Self {
        Self {
            tower,
            lr: 0.001,
            batch_size: 256,
            epochs: 5,
            max_positives: 50,
            negatives: 10,
            test_fraction: 0.2,
            seed,
        }
    }

    fn limits(&self) -> SamplingLimits {
        SamplingLimits {
            max_positives: self.max_positives,
            negatives: self.negatives,
        }
    }
}

/// Everything Phase 1 reads.
#[derive(Debug, Clone, Copy)]
pub struct RepresentationData<'a> {
    pub schema: &'a Schema,
    pub users: &'a [UserRecord],
    /// Known item ids; items seen only in events are added.
    pub items: &'a [String],
    pub events: &'a [Event],
}

/// Row `epoch = 0` is measured before any update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepEpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub batches: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    /// NaN when the held-out impressions hold a single class.
    pub test_auc: f64,
}

#[derive(Debug, Clone)]
pub struct RepresentationOutput {
    pub model: RepresentationModel,
    pub metrics: Vec<RepEpochMetrics>,
    /// Universal embeddings of every user in input order.
    pub store: EmbeddingStore,
}

struct Prepared<'a> {
    records: &'a [UserRecord],
    item_ids: Vec<String>,
    train_batches_seed: u64,
    train_positives: Vec<super::sampling::UserPositives>,
    test_examples: Vec<TrainingExample>,
    /// (user, item, clicked) for held-out users.
    test_impressions: Vec<(usize, usize, bool)>,
    sampler: NegativeSampler,
}

fn prepare<'a>(data: &RepresentationData<'a>, config: &RepresentationTrainConfig) -> Result<Prepared<'a>> {
    let mut item_set: BTreeSet<&str> = data.items.iter().map(String::as_str).collect();
    item_set.extend(data.events.iter().map(|e| e.item_id.as_str()));
    let item_ids: Vec<String> = item_set.into_iter().map(str::to_string).collect();
    if item_ids.is_empty() {
        return Err(Error::Argument("no items to train against".into()));
    }
    let item_index: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let ids: Vec<&str> = data.users.iter().map(|u| u.user_id.as_str()).collect();
    let split = UserSplit::new(&ids, config.test_fraction, config.seed)?;
    let train_users: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, id)| !split.is_test(id))
        .map(|(i, id)| (*id, i))
        .collect();
    let test_users: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, id)| split.is_test(id))
        .map(|(i, id)| (*id, i))
        .collect();

    let train_positives = collect_positives(data.events, &train_users, &item_index, config.max_positives);
    if train_positives.is_empty() {
        return Err(Error::Argument("no training clicks".into()));
    }
    let mut counts = vec![0u64; item_ids.len()];
    for p in &train_positives {
        for &i in &p.all {
            counts[i] += 1;
        }
    }
    let sampler = NegativeSampler::new(&counts)?;
    let test_positives = collect_positives(data.events, &test_users, &item_index, config.max_positives);
    let mut test_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e57);
    let test_examples = build_examples(&test_positives, &sampler, config.limits(), &mut test_rng);

    let mut clicked: HashMap<(usize, usize), bool> = HashMap::new();
    for e in data.events {
        if let (Some(&u), Some(&i)) = (test_users.get(e.user_id.as_str()), item_index.get(e.item_id.as_str())) {
            *clicked.entry((u, i)).or_insert(false) |= e.is_click == 1;
        }
    }
    let mut test_impressions: Vec<(usize, usize, bool)> = clicked.into_iter().map(|((u, i), c)| (u, i, c)).collect();
    test_impressions.sort_unstable();

    Ok(Prepared {
        records: data.users,
        item_ids,
        train_batches_seed: config.seed.wrapping_add(1),
        train_positives,
        test_examples,
        test_impressions,
        sampler,
    })
}

fn examples_loss(
    model: &RepresentationModel,
    items: ParamId,
    records: &[UserRecord],
    examples: &[TrainingExample],
    chunk: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for batch in examples.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let recs: Vec<&UserRecord> = batch.iter().map(|e| &records[e.user]).collect();
        let lists: Vec<Vec<usize>> = batch.iter().map(|e| e.items.clone()).collect();
        let loss = batch_loss(&model.layout, &model.params, items, &mut tape, &recs, &lists)?;
        total += tape.scalar(loss) * batch.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

fn impression_auc(
    model: &RepresentationModel,
    table: &DenseMatrix,
    records: &[UserRecord],
    impressions: &[(usize, usize, bool)],
) -> Result<f64> {
    let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut scores = Vec::with_capacity(impressions.len());
    let mut labels = Vec::with_capacity(impressions.len());
    for &(u, i, c) in impressions {
        let e = match cache.entry(u) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(v) => v.insert(model.user_embedding(&records[u])?),
        };
        scores.push(dot(e, table.row(i)));
        labels.push(c);
    }
    match auc(&scores, &labels) {
        Ok(a) => Ok(a),
        Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Trains the user tower, recording metrics before training and after
/// every epoch, and embeds every user.
pub fn train_representation(
    data: &RepresentationData<'_>,
    config: &RepresentationTrainConfig,
) -> Result<RepresentationOutput> {
    config.tower.validate()?;
    if config.batch_size == 0
        || config.negatives == 0
        || config.max_positives == 0
        || config.lr.is_nan()
        || config.lr <= 0.0
    {
        return Err(Error::Config(
            "batch size, negatives and max positives must be positive and lr > 0".into(),
        ));
    }
    let prep = prepare(data, config)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = RepresentationModel::new(data.schema.clone(), config.tower.clone(), &mut init_rng)?;
    let items = add_item_table(&mut model.params, prep.item_ids.len(), config.tower.m, &mut init_rng);
    let adam = AdamConfig::with_lr(config.lr);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(prep.train_batches_seed);

    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let mut batches = build_training_batches(
        &prep.train_positives,
        &prep.sampler,
        config.limits(),
        config.batch_size,
        &mut sample_rng,
    )?;
    let flat: Vec<TrainingExample> = batches.iter().flatten().cloned().collect();
    let eval = |model: &RepresentationModel, epoch, steps, train_loss| -> Result<RepEpochMetrics> {
        Ok(RepEpochMetrics {
            epoch,
            batches: steps,
            train_loss,
            test_loss: examples_loss(model, items, prep.records, &prep.test_examples, config.batch_size)?,
            test_auc: impression_auc(model, model.params.value(items), prep.records, &prep.test_impressions)?,
        })
    };
    let initial = examples_loss(&model, items, prep.records, &flat, config.batch_size)?;
    metrics.push(eval(&model, 0, 0, initial)?);

    let mut steps = 0;
    for epoch in 1..=config.epochs {
        if epoch > 1 {
            batches = build_training_batches(
                &prep.train_positives,
                &prep.sampler,
                config.limits(),
                config.batch_size,
                &mut sample_rng,
            )?;
        }
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            let recs: Vec<&UserRecord> = batch.iter().map(|e| &prep.records[e.user]).collect();
            let lists: Vec<Vec<usize>> = batch.iter().map(|e| e.items.clone()).collect();
            let loss = batch_loss(&model.layout, &model.params, items, &mut tape, &recs, &lists)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, step {steps}"
                )));
            }
            let grads = tape.backward(loss)?;
            model.params.accumulate(&tape, &grads)?;
            model.params.adam_step(&adam)?;
            total += value * batch.len() as f64;
            seen += batch.len();
            steps += 1;
        }
        let row = eval(&model, epoch, steps, total / seen.max(1) as f64)?;
        log::info!(
            "phase 1 epoch {epoch}: train {:.4} test {:.4} auc {:.4}",
            row.train_loss,
            row.test_loss,
            row.test_auc
        );
        metrics.push(row);
    }

    let tower_only = strip_items(&model.params, items);
    let model = RepresentationModel {
        layout: model.layout,
        params: tower_only,
    };
    let store = embed_users(&model, data.users)?;
    Ok(RepresentationOutput { model, metrics, store })
}

fn strip_items(params: &ParameterSet, items: ParamId) -> ParameterSet {
    let mut out = ParameterSet::new();
    for (id, name, p) in params.iter() {
        if id != items {
            out.add(name.to_string(), p.value.clone());
        }
    }
    out
}

/// Unit-length universal embeddings for `users`, in order. A zero tower
/// output stays zero.
pub fn embed_users(model: &RepresentationModel, users: &[UserRecord]) -> Result<EmbeddingStore> {
    let mut vectors = DenseMatrix::zeros(users.len(), model.m());
    for (r, u) in users.iter().enumerate() {
        let mut v = model.user_embedding(u)?;
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        vectors.row_mut(r).copy_from_slice(&v);
    }
    EmbeddingStore::new(
        EmbeddingSpace::Universal,
        users.iter().map(|u| u.user_id.clone()).collect(),
        vectors,
    )
}

pub fn write_metrics_csv(path: &Path, metrics: &[RepEpochMetrics]) -> Result<()> {
    let mut out = String::from("epoch,batches,train_loss,test_loss,test_auc\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.batches, m.train_loss, m.test_loss, m.test_auc
        ));
    }
    write_atomic(path, out.as_bytes())
}
