//! Run configuration: defaults, then the config file, then flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ralm::config::KeyValueConfig;
use ralm::lookalike::{CombineWeights, Pooling};
use ralm::representation::MergeMode;
use ralm::serving::{ReplayOptions, ServingConfig};
use ralm::{Error, Result};

pub const KEYS: &[&str] = &[
    "seed",
    "data_dir",
    "artifacts_dir",
    "users",
    "items",
    "topics",
    "fields",
    "m",
    "h",
    "k_a",
    "s_a",
    "lr",
    "batch",
    "epochs",
    "rep_epochs",
    "lookalike_epochs",
    "merge",
    "pooling",
    "negatives",
    "max_positives",
    "test_fraction",
    "min_seeds",
    "cluster_k",
    "alpha",
    "beta",
    "seed_cap",
    "recluster_cadence_ms",
    "confidence_floor",
    "eval_ks",
    "rep_model_path",
    "universal_embeddings_path",
    "model_path",
    "lookalike_embeddings_path",
    "events_path",
    "bind",
    "replay_speed",
    "score_every",
    "top_n",
    "replay_report_path",
    "bootstrap_events",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub artifacts_dir: PathBuf,
    pub users: usize,
    pub items: usize,
    pub topics: usize,
    pub fields: usize,
    pub m: usize,
    pub h: usize,
    pub k_a: usize,
    pub s_a: usize,
    pub lr: f64,
    pub batch: usize,
    pub rep_epochs: usize,
    pub lookalike_epochs: usize,
    pub merge: MergeMode,
    pub pooling: Pooling,
    pub negatives: usize,
    pub max_positives: usize,
    pub test_fraction: f64,
    pub min_seeds: usize,
    pub cluster_k: usize,
    pub weights: CombineWeights,
    pub seed_cap: usize,
    pub recluster_cadence_ms: u64,
    pub confidence_floor: usize,
    pub eval_ks: Vec<usize>,
    pub rep_model_path: PathBuf,
    pub universal_embeddings_path: PathBuf,
    pub model_path: PathBuf,
    pub lookalike_embeddings_path: PathBuf,
    pub events_path: PathBuf,
    pub bind: String,
    pub replay_speed: f64,
    pub score_every: usize,
    pub top_n: usize,
    pub replay_report_path: PathBuf,
    pub bootstrap_events: bool,
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("{key} = {v}: {e}")))
        })
        .collect()
}

struct Source<'a> {
    file: &'a KeyValueConfig,
    flags: &'a [(String, String)],
}

impl Source<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.flags
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .or_else(|| self.file.get_str(key))
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            Some(v) => v.parse().map_err(|e| Error::Config(format!("{key} = {v}: {e}"))),
            None => Ok(default),
        }
    }

    fn path(&self, key: &str, default: PathBuf) -> PathBuf {
        self.raw(key).map_or(default, PathBuf::from)
    }
}

impl RunConfig {
    /// Merges `flags` (key, value) over the config file over defaults and
    /// validates the result.
    pub fn resolve(config_path: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let file = match config_path {
            Some(p) => KeyValueConfig::load(p)?,
            None => KeyValueConfig::default(),
        };
        file.reject_unknown(KEYS)?;
        if let Some((k, _)) = flags.iter().find(|(k, _)| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown setting {k}")));
        }
        let src = Source { file: &file, flags };
        let data_dir = src.path("data_dir", PathBuf::from("data"));
        let artifacts_dir = src.path("artifacts_dir", PathBuf::from("artifacts"));
        let epochs = src.get("epochs", 5usize)?;
        let h = src.get("h", 16usize)?;
        let cfg = Self {
            seed: src.get("seed", 0u64)?,
            users: src.get("users", 5000)?,
            items: src.get("items", 300)?,
            topics: src.get("topics", 16)?,
            fields: src.get("fields", 5)?,
            m: src.get("m", 16)?,
            h,
            k_a: src.get("k_a", 8)?,
            s_a: src.get("s_a", h)?,
            lr: src.get("lr", 0.001)?,
            batch: src.get("batch", 256)?,
            rep_epochs: src.get("rep_epochs", epochs)?,
            lookalike_epochs: src.get("lookalike_epochs", epochs)?,
            merge: src.get("merge", MergeMode::Attention)?,
            pooling: src.get("pooling", Pooling::Attention)?,
            negatives: src.get("negatives", 10)?,
            max_positives: src.get("max_positives", 50)?,
            test_fraction: src.get("test_fraction", 0.2)?,
            min_seeds: src.get("min_seeds", 1)?,
            cluster_k: src.get("cluster_k", 20)?,
            weights: CombineWeights {
                alpha: src.get("alpha", 0.3)?,
                beta: src.get("beta", 0.7)?,
            },
            seed_cap: src.get("seed_cap", 10_000)?,
            recluster_cadence_ms: src.get("recluster_cadence_ms", 300_000)?,
            confidence_floor: src.get("confidence_floor", 5)?,
            eval_ks: match src.raw("eval_ks") {
                Some(v) => list("eval_ks", v)?,
                None => vec![10, 50],
            },
            rep_model_path: src.path("rep_model_path", artifacts_dir.join("representation.bin")),
            universal_embeddings_path: src.path("universal_embeddings_path", artifacts_dir.join("universal.emb")),
            model_path: src.path("model_path", artifacts_dir.join("lookalike.bin")),
            lookalike_embeddings_path: src.path("lookalike_embeddings_path", artifacts_dir.join("lookalike.emb")),
            events_path: src.path("events_path", data_dir.join("events.jsonl")),
            bind: src.get("bind", "127.0.0.1:8080".to_string())?,
            replay_speed: src.get("replay_speed", 0.0)?,
            score_every: src.get("score_every", 100)?,
            top_n: src.get("top_n", 10)?,
            replay_report_path: src.path("replay_report_path", artifacts_dir.join("replay_report.json")),
            bootstrap_events: src.get("bootstrap_events", true)?,
            data_dir,
            artifacts_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.fields == 0 {
            return bad("fields must be at least 1");
        }
        if self.m == 0 || self.h == 0 || self.k_a == 0 || self.s_a == 0 {
            return bad("m, h, k_a and s_a must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.negatives == 0 || self.max_positives == 0 {
            return bad("batch, negatives and max_positives must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)");
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("eval_ks must list positive cut-offs");
        }
        if !(self.replay_speed >= 0.0 && self.replay_speed.is_finite()) {
            return bad("replay_speed must be non-negative");
        }
        CombineWeights::new(self.weights.alpha, self.weights.beta).map_err(|e| Error::Config(e.to_string()))?;
        self.serving().validate()
    }

    pub fn serving(&self) -> ServingConfig {
        ServingConfig {
            seed_cap: self.seed_cap,
            cluster_k: self.cluster_k,
            recluster_cadence_ms: self.recluster_cadence_ms,
            weights: self.weights,
            confidence_floor: self.confidence_floor,
            seed: self.seed,
            ..ServingConfig::default()
        }
    }

    pub fn replay_options(&self) -> ReplayOptions {
        ReplayOptions {
            speed: self.replay_speed,
            score_every: self.score_every,
            top_n: self.top_n,
        }
    }

    pub fn rep_metrics_path(&self) -> PathBuf {
        self.artifacts_dir.join("rep_metrics.csv")
    }

    pub fn lookalike_metrics_path(&self) -> PathBuf {
        self.artifacts_dir.join("lookalike_metrics.csv")
    }

    pub fn eval_path(&self) -> PathBuf {
        self.artifacts_dir.join("eval.json")
    }
}
