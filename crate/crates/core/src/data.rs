//! Dataset records and their JSON-lines files.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Univalent,
    Multivalent,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub field_id: usize,
    pub name: String,
    pub kind: FieldKind,
    /// Ignored for continuous fields.
    #[serde(default)]
    pub vocabulary_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub fields: Vec<FieldSchema>,
}

impl Schema {
    pub fn new(fields: Vec<FieldSchema>) -> Result<Self> {
        let s = Self { fields };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Schema("schema has no fields".into()));
        }
        let mut names = HashSet::new();
        for (i, f) in self.fields.iter().enumerate() {
            if f.field_id != i {
                return Err(Error::Schema(format!(
                    "field ids must be dense 0..n-1; field '{}' has id {} at position {i}",
                    f.name, f.field_id
                )));
            }
            if f.kind != FieldKind::Continuous && f.vocabulary_size == 0 {
                return Err(Error::Schema(format!("field '{}' has an empty vocabulary", f.name)));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field name '{}'", f.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| missing_or_io(e, path))?;
        let s: Schema = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

/// Value of one field for one user.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Index(usize),
    Indices(Vec<usize>),
    Real(f64),
}

/// Features of one user, ordered by field id.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: String,
    pub fields: Vec<FieldValue>,
}

/// The on-disk shape of a `users.jsonl` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawUser {
    pub user_id: String,
    pub fields: BTreeMap<String, serde_json::Value>,
}

impl UserRecord {
    pub fn from_raw(raw: &RawUser, schema: &Schema) -> Result<Self> {
        let bad =
            |f: &FieldSchema, what: &str| Error::Schema(format!("user '{}', field '{}': {what}", raw.user_id, f.name));
        let mut fields = Vec::with_capacity(schema.len());
        for f in &schema.fields {
            let v = raw.fields.get(&f.name);
            let index = |x: &serde_json::Value| -> Result<usize> {
                let i = x.as_u64().ok_or_else(|| bad(f, "expected a category index"))? as usize;
                if i >= f.vocabulary_size {
                    return Err(bad(
                        f,
                        &format!("index {i} out of range (vocabulary {})", f.vocabulary_size),
                    ));
                }
                Ok(i)
            };
            let value = match (f.kind, v) {
                (FieldKind::Univalent, Some(x)) => FieldValue::Index(index(x)?),
                (FieldKind::Multivalent, None) => FieldValue::Indices(Vec::new()),
                (FieldKind::Multivalent, Some(serde_json::Value::Array(xs))) => {
                    FieldValue::Indices(xs.iter().map(index).collect::<Result<_>>()?)
                }
                (FieldKind::Continuous, Some(x)) => {
                    let r = x.as_f64().ok_or_else(|| bad(f, "expected a number"))?;
                    if !(0.0..=1.0).contains(&r) {
                        return Err(bad(f, &format!("continuous value {r} outside [0, 1]")));
                    }
                    FieldValue::Real(r)
                }
                (_, None) => return Err(bad(f, "missing")),
                (_, Some(_)) => return Err(bad(f, "wrong value type")),
            };
            fields.push(value);
        }
        Ok(Self {
            user_id: raw.user_id.clone(),
            fields,
        })
    }

    pub fn to_raw(&self, schema: &Schema) -> RawUser {
        let fields = schema
            .fields
            .iter()
            .zip(&self.fields)
            .map(|(f, v)| {
                let j = match v {
                    FieldValue::Index(i) => serde_json::json!(i),
                    FieldValue::Indices(is) => serde_json::json!(is),
                    FieldValue::Real(r) => serde_json::json!(r),
                };
                (f.name.clone(), j)
            })
            .collect();
        RawUser {
            user_id: self.user_id.clone(),
            fields,
        }
    }
}

/// One impression; `is_click = 1` marks a click.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: String,
    pub item_id: String,
    pub is_click: u8,
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub tags: Vec<String>,
}

fn missing_or_io(e: std::io::Error, path: &Path) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingDependency(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = std::fs::File::open(path).map_err(|e| missing_or_io(e, path))?;
    Ok(BufReader::new(file).lines())
}

/// Parses every non-blank line; the first malformed line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in open_lines(path)?.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Parses what it can and counts the malformed lines.
pub fn read_jsonl_lenient<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, usize)> {
    let mut out = Vec::new();
    let mut bad = 0;
    for line in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            Err(_) => bad += 1,
        }
    }
    Ok((out, bad))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)
}

pub fn load_users(path: &Path, schema: &Schema) -> Result<Vec<UserRecord>> {
    let raw: Vec<RawUser> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    raw.iter()
        .map(|r| {
            if !seen.insert(r.user_id.as_str()) {
                return Err(Error::Schema(format!("duplicate user id '{}'", r.user_id)));
            }
            UserRecord::from_raw(r, schema)
        })
        .collect()
}

/// Deterministic partition of users into training and held-out sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub train: HashSet<String>,
    pub test: HashSet<String>,
}

impl UserSplit {
    /// Sorts ids, shuffles with `seed`, and holds out the first
    /// `round(test_fraction · n)` users.
    pub fn new<S: AsRef<str>>(user_ids: &[S], test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut ids: Vec<&str> = user_ids.iter().map(AsRef::as_ref).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * ids.len() as f64).round() as usize;
        Ok(Self {
            test: ids[..n_test].iter().map(|s| s.to_string()).collect(),
            train: ids[n_test..].iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn is_test(&self, user_id: &str) -> bool {
        self.test.contains(user_id)
    }
}
