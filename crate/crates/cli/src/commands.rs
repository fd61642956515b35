//! Pipeline stages behind each subcommand.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use ralm::clustering::KMeansOptions;
use ralm::data::{load_users, read_jsonl, Event, ItemRecord, Schema, UserSplit};
use ralm::evalgen::{diversity, generate_world, gini, DiversityReport, ItemTaxonomy, ReadEvent, WorldSpec};
use ralm::lookalike::{
    self, evaluate, recommend, seeds_representations, Campaign, LookalikeModel, LookalikeTrainConfig,
};
use ralm::representation::{self, train_representation, RepresentationData, RepresentationTrainConfig, TowerConfig};
use ralm::serving::{replay_file, Engine};
use ralm::store::{write_atomic, EmbeddingStore};
use ralm::Error;

use crate::config::RunConfig;

fn require(path: &Path) -> ralm::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingDependency(path.to_path_buf()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn gen(cfg: &RunConfig) -> anyhow::Result<()> {
    let mut spec = WorldSpec::new(cfg.users, cfg.seed);
    if cfg.fields > spec.fields.len() {
        return Err(Error::Config(format!("fields must be at most {}", spec.fields.len())).into());
    }
    spec.fields.truncate(cfg.fields);
    spec.items = cfg.items;
    spec.topics = cfg.topics;
    let world = generate_world(&spec)?;
    world.write(&cfg.data_dir)?;
    println!(
        "wrote {} users, {} items, {} events to {}",
        world.users.len(),
        world.items.len(),
        world.events.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

struct Dataset {
    schema: Schema,
    users: Vec<ralm::data::UserRecord>,
    items: Vec<ItemRecord>,
    events: Vec<Event>,
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let schema_path = cfg.data_dir.join("schema.json");
    let users_path = cfg.data_dir.join("users.jsonl");
    let items_path = cfg.data_dir.join("items.jsonl");
    for p in [&schema_path, &users_path, &items_path, &cfg.events_path] {
        require(p)?;
    }
    let schema = Schema::load(&schema_path)?;
    let users = load_users(&users_path, &schema)?;
    let items = read_jsonl(&items_path)?;
    let events = read_jsonl(&cfg.events_path)?;
    Ok(Dataset {
        schema,
        users,
        items,
        events,
    })
}

pub fn train_rep(cfg: &RunConfig) -> anyhow::Result<()> {
    let ds = load_dataset(cfg)?;
    let item_ids: Vec<String> = ds.items.iter().map(|i| i.item_id.clone()).collect();
    let data = RepresentationData {
        schema: &ds.schema,
        users: &ds.users,
        items: &item_ids,
        events: &ds.events,
    };
    let tower = TowerConfig::with_defaults(cfg.m, cfg.k_a, cfg.merge);
    let mut tc = RepresentationTrainConfig::new(tower, cfg.seed);
    tc.lr = cfg.lr;
    tc.batch_size = cfg.batch;
    tc.epochs = cfg.rep_epochs;
    tc.negatives = cfg.negatives;
    tc.max_positives = cfg.max_positives;
    tc.test_fraction = cfg.test_fraction;
    let out = train_representation(&data, &tc)?;
    std::fs::create_dir_all(&cfg.artifacts_dir)?;
    out.model.save(&cfg.rep_model_path)?;
    out.store.save(&cfg.universal_embeddings_path)?;
    representation::write_metrics_csv(&cfg.rep_metrics_path(), &out.metrics)?;
    let (first, last) = (&out.metrics[0], &out.metrics[out.metrics.len() - 1]);
    println!(
        "representation ({:?}): test loss {:.4} -> {:.4}, test auc {:.4} -> {:.4}",
        cfg.merge, first.test_loss, last.test_loss, first.test_auc, last.test_auc
    );
    Ok(())
}

fn campaign(cfg: &RunConfig, universal: &EmbeddingStore, events: &[Event]) -> ralm::Result<Campaign> {
    let split = UserSplit::new(universal.ids(), cfg.test_fraction, cfg.seed)?;
    Ok(Campaign::build(universal, events, &split, cfg.min_seeds))
}

pub fn train_lookalike(cfg: &RunConfig) -> anyhow::Result<()> {
    require(&cfg.universal_embeddings_path)?;
    require(&cfg.events_path)?;
    let universal = EmbeddingStore::load(&cfg.universal_embeddings_path)?;
    let events: Vec<Event> = read_jsonl(&cfg.events_path)?;
    let campaign = campaign(cfg, &universal, &events)?;
    let mut tc = LookalikeTrainConfig::new(cfg.h, cfg.seed);
    tc.s_a = cfg.s_a;
    tc.weights = cfg.weights;
    tc.pooling = cfg.pooling;
    tc.cluster_k = cfg.cluster_k;
    tc.epochs = cfg.lookalike_epochs;
    tc.lr = cfg.lr;
    tc.batch_size = cfg.batch;
    tc.negatives = cfg.negatives;
    tc.eval_ks = cfg.eval_ks.clone();
    let out = lookalike::train_lookalike(&universal, &campaign, cfg.k_a, &tc)?;
    std::fs::create_dir_all(&cfg.artifacts_dir)?;
    out.model.save(&cfg.model_path)?;
    out.store.save(&cfg.lookalike_embeddings_path)?;
    lookalike::write_metrics_csv(&cfg.lookalike_metrics_path(), &out.metrics)?;
    let (first, last) = (&out.metrics[0], &out.metrics[out.metrics.len() - 1]);
    println!(
        "look-alike ({:?}, k={}): {} candidates, train loss {:.4} -> {:.4}, test auc {:.4} -> {:.4}",
        cfg.pooling,
        cfg.cluster_k,
        campaign.candidates.len(),
        first.train_loss,
        last.train_loss,
        first.test_auc,
        last.test_auc
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SideMetrics {
    diversity: DiversityReport,
    gini: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub candidates: usize,
    pub test_users: usize,
    pub test_impressions: usize,
    pub test_auc: f64,
    pub test_loss: f64,
    pub prec_at: BTreeMap<usize, f64>,
    pub random_prec_at: BTreeMap<usize, f64>,
    recommended: SideMetrics,
    held_out: SideMetrics,
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    for p in [
        &cfg.model_path,
        &cfg.lookalike_embeddings_path,
        &cfg.universal_embeddings_path,
        &cfg.events_path,
    ] {
        require(p)?;
    }
    let items_path = cfg.data_dir.join("items.jsonl");
    require(&items_path)?;
    let model = LookalikeModel::load(&cfg.model_path)?;
    let store = EmbeddingStore::load(&cfg.lookalike_embeddings_path)?;
    let universal = EmbeddingStore::load(&cfg.universal_embeddings_path)?;
    let events: Vec<Event> = read_jsonl(&cfg.events_path)?;
    let items: Vec<ItemRecord> = read_jsonl(&items_path)?;
    let campaign = campaign(cfg, &universal, &events)?;
    if campaign.test_impressions.is_empty() {
        return Err(Error::UndefinedMetric("no held-out impressions on any candidate".into()).into());
    }
    if store.ids() != universal.ids() {
        anyhow::bail!("look-alike and universal stores list different users; retrain the look-alike phase");
    }
    let opts = KMeansOptions {
        seed: cfg.seed,
        ..KMeansOptions::default()
    };
    let reps = seeds_representations(&store, &campaign, cfg.cluster_k, opts, 0)?;
    let centroids: Vec<_> = reps.into_iter().map(|r| r.centroids).collect();
    let ev = evaluate(&model, store.vectors(), &campaign, &centroids, &cfg.eval_ks)?;

    let taxonomy: HashMap<String, ItemTaxonomy> = items
        .into_iter()
        .map(|i| {
            (
                i.item_id,
                ItemTaxonomy {
                    categories: i.categories,
                    tags: i.tags,
                },
            )
        })
        .collect();
    let top_k = cfg.eval_ks[0];
    let recs = recommend(&model, store.vectors(), &centroids, &campaign.test_users, top_k)?;
    let mut exposure = vec![0.0; campaign.candidates.len()];
    let mut rec_log = Vec::new();
    for (&u, list) in campaign.test_users.iter().zip(&recs) {
        for &c in list {
            exposure[c] += 1.0;
            rec_log.push(ReadEvent {
                user_id: store.ids()[u].clone(),
                item_id: campaign.candidates[c].clone(),
                ts: 0,
            });
        }
    }
    let test_ids: std::collections::HashSet<&str> =
        campaign.test_users.iter().map(|&u| store.ids()[u].as_str()).collect();
    let cand_index: HashMap<&str, usize> = campaign
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut clicks = vec![0.0; campaign.candidates.len()];
    let mut read_log = Vec::new();
    for e in events
        .iter()
        .filter(|e| e.is_click == 1 && test_ids.contains(e.user_id.as_str()))
    {
        if let Some(&c) = cand_index.get(e.item_id.as_str()) {
            clicks[c] += 1.0;
        }
        read_log.push(ReadEvent {
            user_id: e.user_id.clone(),
            item_id: e.item_id.clone(),
            ts: e.ts,
        });
    }
    let report = EvalReport {
        candidates: campaign.candidates.len(),
        test_users: campaign.test_users.len(),
        test_impressions: campaign.test_impressions.len(),
        test_auc: ev.test_auc,
        test_loss: ev.test_loss,
        prec_at: ev.prec_at.iter().copied().collect(),
        random_prec_at: ev.random_prec_at.iter().copied().collect(),
        recommended: SideMetrics {
            diversity: diversity(&rec_log, &taxonomy),
            gini: gini(&exposure).unwrap_or(f64::NAN),
        },
        held_out: SideMetrics {
            diversity: diversity(&read_log, &taxonomy),
            gini: gini(&clicks).unwrap_or(f64::NAN),
        },
    };
    std::fs::create_dir_all(&cfg.artifacts_dir)?;
    write_json(&cfg.eval_path(), &report)?;
    println!("metric\tvalue");
    println!("auc\t{:.4}", report.test_auc);
    println!("test_loss\t{:.4}", report.test_loss);
    for (k, p) in &report.prec_at {
        println!("prec@{k}\t{p:.4}\t(random {:.4})", report.random_prec_at[k]);
    }
    println!(
        "diversity@{top_k}\t{:.3} categories, {:.3} tags per user-day",
        report.recommended.diversity.categories_per_user_day, report.recommended.diversity.tags_per_user_day
    );
    println!(
        "gini@{top_k}\t{:.4}\t(held-out clicks {:.4})",
        report.recommended.gini, report.held_out.gini
    );
    Ok(())
}

pub fn build_engine(cfg: &RunConfig) -> anyhow::Result<Engine> {
    require(&cfg.model_path)?;
    require(&cfg.lookalike_embeddings_path)?;
    let model = LookalikeModel::load(&cfg.model_path)?;
    let store = EmbeddingStore::load(&cfg.lookalike_embeddings_path)?;
    Ok(Engine::new(cfg.serving(), model, store)?)
}

pub fn replay(cfg: &RunConfig) -> anyhow::Result<()> {
    let engine = build_engine(cfg)?;
    let report = replay_file(&engine, &cfg.events_path, cfg.replay_options())
        .with_context(|| format!("replaying {}", cfg.events_path.display()))?;
    if let Some(dir) = cfg.replay_report_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_json(&cfg.replay_report_path, &report)?;
    let s = &report.summary;
    println!(
        "replayed {} events ({} clicks, {} malformed): {} candidates, {} seeds, snapshot version {}, {} re-clusters",
        s.events, s.clicks, s.malformed, s.candidates, s.total_seeds, s.final_version, s.reclustered
    );
    println!(
        "scoring: {} requests, p50 {:.0} us, p99 {:.0} us",
        report.latency.count, report.latency.p50_us, report.latency.p99_us
    );
    Ok(())
}
