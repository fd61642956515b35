//! Deterministic synthetic users, items and impressions with planted
//! interest topics and fields of differing relevance.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, Event, FieldKind, FieldSchema, FieldValue, ItemRecord, Schema, UserRecord};
use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::store::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// Ignored for continuous fields.
    pub vocabulary_size: usize,
    /// Probability that the field reflects a user's topics; otherwise its
    /// values come from the generic part of the vocabulary.
    pub relevance: f64,
    /// Values drawn for a multivalent field.
    pub values_per_user: usize,
}

impl FieldSpec {
    fn categorical(
        name: &str,
        kind: FieldKind,
        vocabulary_size: usize,
        relevance: f64,
        values_per_user: usize,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            vocabulary_size,
            relevance,
            values_per_user,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub users: usize,
    pub items: usize,
    pub topics: usize,
    pub fields: Vec<FieldSpec>,
    /// Share of each categorical vocabulary holding topic-free values.
    pub generic_fraction: f64,
    /// Probability a user has a second interest topic.
    pub second_topic_prob: f64,
    /// Impressions generated per user.
    pub impressions_per_user: usize,
    /// Zipf exponent of item popularity.
    pub popularity_exponent: f64,
    /// Click logit is `click_bias + click_scale · affinity`, affinity in [0, 1].
    pub click_bias: f64,
    pub click_scale: f64,
    pub start_ts: i64,
    pub span_days: u32,
    pub seed: u64,
}

impl WorldSpec {
    /// Five fields: two strong, three weak.
    pub fn new(users: usize, seed: u64) -> Self {
        Self {
            users,
            items: 300,
            topics: 16,
            fields: vec![
                FieldSpec::categorical("interest_tags", FieldKind::Multivalent, 96, 0.7, 3),
                FieldSpec::categorical("favorite_category", FieldKind::Univalent, 32, 0.6, 1),
                FieldSpec::categorical("age_band", FieldKind::Univalent, 16, 0.25, 1),
                FieldSpec::categorical("region", FieldKind::Univalent, 24, 0.2, 1),
                FieldSpec::categorical("activity", FieldKind::Continuous, 0, 0.2, 1),
            ],
            generic_fraction: 0.25,
            second_topic_prob: 0.5,
            impressions_per_user: 40,
            popularity_exponent: 0.8,
            click_bias: -5.0,
            click_scale: 7.0,
            start_ts: 1_700_000_000,
            span_days: 7,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fields.is_empty() {
            return bad("world needs at least one field".into());
        }
        if self.topics == 0 {
            return bad("world needs at least one topic".into());
        }
        if self.users > 0 && self.items == 0 {
            return bad("world with users needs items".into());
        }
        for f in &self.fields {
            if !(f.relevance > 0.0 && f.relevance <= 1.0) {
                return bad(format!("field '{}': relevance must be in (0, 1]", f.name));
            }
            if f.kind != FieldKind::Continuous && f.vocabulary_size == 0 {
                return bad(format!("field '{}': empty vocabulary", f.name));
            }
            if f.kind == FieldKind::Multivalent && f.values_per_user == 0 {
                return bad(format!("field '{}': values_per_user must be positive", f.name));
            }
        }
        if !(0.0..1.0).contains(&self.generic_fraction) {
            return bad("generic_fraction outside [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.second_topic_prob) {
            return bad("second_topic_prob outside [0, 1]".into());
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::new(
            self.fields
                .iter()
                .enumerate()
                .map(|(i, f)| FieldSchema {
                    field_id: i,
                    name: f.name.clone(),
                    kind: f.kind,
                    vocabulary_size: if f.kind == FieldKind::Continuous {
                        0
                    } else {
                        f.vocabulary_size
                    },
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    /// (topic, weight), weights summing to 1.
    pub topics: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTruth {
    pub item_id: String,
    pub topics: Vec<usize>,
    pub popularity: f64,
}

/// Planted structure, written as `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: WorldSpec,
    pub users: Vec<UserTruth>,
    pub items: Vec<ItemTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub schema: Schema,
    pub users: Vec<UserRecord>,
    pub items: Vec<ItemRecord>,
    /// Sorted by time, then user, then item.
    pub events: Vec<Event>,
    pub truth: Truth,
}

fn pad(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(1)
}

/// Values of a vocabulary associated with a topic.
fn topic_block(topic: usize, topics: usize, vocab: usize) -> std::ops::Range<usize> {
    let lo = topic * vocab / topics;
    let hi = ((topic + 1) * vocab / topics).max(lo + 1).min(vocab);
    lo..hi
}

fn draw_topic<R: Rng + ?Sized>(truth: &[(usize, f64)], rng: &mut R) -> usize {
    let mut x: f64 = rng.random();
    for &(t, w) in truth {
        if x < w {
            return t;
        }
        x -= w;
    }
    truth[truth.len() - 1].0
}

fn field_value<R: Rng + ?Sized>(f: &FieldSpec, topics: &[(usize, f64)], spec: &WorldSpec, rng: &mut R) -> FieldValue {
    let informative = rng.random::<f64>() < f.relevance;
    let generic =
        ((f.vocabulary_size as f64 * spec.generic_fraction) as usize).min(f.vocabulary_size.saturating_sub(1));
    let topical = f.vocabulary_size - generic;
    let categorical = |rng: &mut R| -> usize {
        if informative || generic == 0 {
            let b = topic_block(draw_topic(topics, rng), spec.topics, topical);
            rng.random_range(b)
        } else {
            rng.random_range(topical..f.vocabulary_size)
        }
    };
    match f.kind {
        FieldKind::Univalent => FieldValue::Index(categorical(rng)),
        FieldKind::Multivalent => {
            let mut v: Vec<usize> = (0..f.values_per_user).map(|_| categorical(rng)).collect();
            v.sort_unstable();
            v.dedup();
            FieldValue::Indices(v)
        }
        FieldKind::Continuous => {
            let r = if informative {
                (topics[0].0 as f64 + 0.5) / spec.topics as f64
            } else {
                rng.random()
            };
            FieldValue::Real((r * 1e6).round() / 1e6)
        }
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = spec.topics;

    let iw = pad(spec.items);
    let mut popularity: Vec<f64> = (0..spec.items)
        .map(|r| 1.0 / ((r + 1) as f64).powf(spec.popularity_exponent))
        .collect();
    popularity.shuffle(&mut rng);
    let total: f64 = popularity.iter().sum();
    let all_topics: Vec<usize> = (0..t).collect();
    let mut item_truth = Vec::with_capacity(spec.items);
    let mut items = Vec::with_capacity(spec.items);
    for (i, &p) in popularity.iter().enumerate() {
        let n = rng.random_range(1..=3usize.min(t));
        let mut topics: Vec<usize> = all_topics.choose_multiple(&mut rng, n).copied().collect();
        topics.sort_unstable();
        let item_id = format!("i{i:0iw$}");
        let tags = topics
            .iter()
            .map(|&tp| format!("tag{}", rng.random_range(topic_block(tp, t, 6 * t))))
            .collect();
        items.push(ItemRecord {
            item_id: item_id.clone(),
            categories: topics.iter().map(|tp| format!("cat{tp}")).collect(),
            tags,
        });
        item_truth.push(ItemTruth {
            item_id,
            topics,
            popularity: p / total,
        });
    }

    let uw = pad(spec.users);
    let mut users = Vec::with_capacity(spec.users);
    let mut user_truth = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let primary = rng.random_range(0..t);
        let mut topics = vec![(primary, 1.0)];
        if t > 1 && rng.random::<f64>() < spec.second_topic_prob {
            let mut second = rng.random_range(0..t - 1);
            if second >= primary {
                second += 1;
            }
            topics = vec![(primary, 0.6), (second, 0.4)];
        }
        let user_id = format!("u{u:0uw$}");
        let fields = spec
            .fields
            .iter()
            .map(|f| field_value(f, &topics, spec, &mut rng))
            .collect();
        users.push(UserRecord {
            user_id: user_id.clone(),
            fields,
        });
        user_truth.push(UserTruth { user_id, topics });
    }

    let mut events = Vec::with_capacity(spec.users * spec.impressions_per_user);
    if spec.users > 0 {
        let pick =
            WeightedIndex::new(item_truth.iter().map(|i| i.popularity)).map_err(|e| Error::Config(e.to_string()))?;
        let span = i64::from(spec.span_days.max(1)) * 86_400;
        for (user, truth) in users.iter().zip(&user_truth) {
            for _ in 0..spec.impressions_per_user {
                let i = pick.sample(&mut rng);
                let affinity: f64 = truth
                    .topics
                    .iter()
                    .filter(|(tp, _)| item_truth[i].topics.contains(tp))
                    .map(|(_, w)| w)
                    .sum();
                let p = sigmoid(spec.click_bias + spec.click_scale * affinity);
                let clicked = rng.random::<f64>() < p;
                events.push(Event {
                    user_id: user.user_id.clone(),
                    item_id: items[i].item_id.clone(),
                    is_click: u8::from(clicked),
                    ts: spec.start_ts + rng.random_range(0..span),
                });
            }
        }
    }
    events.sort_by(|a, b| (a.ts, &a.user_id, &a.item_id).cmp(&(b.ts, &b.user_id, &b.item_id)));

    Ok(World {
        schema,
        users,
        items,
        events,
        truth: Truth {
            spec: spec.clone(),
            users: user_truth,
            items: item_truth,
        },
    })
}

impl World {
    /// Writes users.jsonl, items.jsonl, events.jsonl, schema.json and truth.json.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let raw: Vec<_> = self.users.iter().map(|u| u.to_raw(&self.schema)).collect();
        write_jsonl(&dir.join("users.jsonl"), &raw)?;
        write_jsonl(&dir.join("items.jsonl"), &self.items)?;
        write_jsonl(&dir.join("events.jsonl"), &self.events)?;
        self.schema.save(&dir.join("schema.json"))?;
        let mut truth = serde_json::to_vec(&self.truth)?;
        truth.push(b'\n');
        write_atomic(&dir.join("truth.json"), &truth)
    }
}
