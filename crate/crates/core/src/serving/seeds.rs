//! Capped, recency-ordered seed sets.

use std::collections::{BTreeMap, HashMap};

/// Distinct users ordered by their most recent click, oldest first.
///
/// Re-inserting a member moves it to the newest position; inserting past the
/// cap evicts the oldest member.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedSet {
    cap: usize,
    next_seq: u64,
    by_user: HashMap<String, u64>,
    by_seq: BTreeMap<u64, String>,
}

/// What one insertion did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Insertion {
    Added,
    Promoted,
    Evicted(String),
}

impl SeedSet {
    /// `cap` must be at least one.
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            ..Self::default()
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.by_user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }

    pub fn contains(&self, user: &str) -> bool {
        self.by_user.contains_key(user)
    }

    pub fn insert(&mut self, user: &str) -> Insertion {
        let seq = self.next_seq;
        self.next_seq += 1;
        if let Some(old) = self.by_user.insert(user.to_string(), seq) {
            self.by_seq.remove(&old);
            self.by_seq.insert(seq, user.to_string());
            return Insertion::Promoted;
        }
        self.by_seq.insert(seq, user.to_string());
        if self.by_user.len() > self.cap {
            let (_, oldest) = self.by_seq.pop_first().expect("non-empty seed set");
            self.by_user.remove(&oldest);
            return Insertion::Evicted(oldest);
        }
        Insertion::Added
    }

    /// Members from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.by_seq.values().map(String::as_str)
    }

    pub fn to_vec(&self) -> Vec<String> {
        self.by_seq.values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_eviction() {
        let mut s = SeedSet::new(3);
        for u in ["u1", "u2", "u3"] {
            assert_eq!(s.insert(u), Insertion::Added);
        }
        assert_eq!(s.insert("u4"), Insertion::Evicted("u1".into()));
        assert_eq!(s.to_vec(), ["u2", "u3", "u4"]);
    }

    #[test]
    fn duplicate_is_promoted_not_repeated() {
        let mut s = SeedSet::new(3);
        s.insert("u1");
        s.insert("u2");
        assert_eq!(s.insert("u1"), Insertion::Promoted);
        assert_eq!(s.to_vec(), ["u2", "u1"]);
        s.insert("u3");
        s.insert("u4");
        assert_eq!(s.to_vec(), ["u1", "u3", "u4"]);
    }

    #[test]
    fn zero_cap_is_raised_to_one() {
        let mut s = SeedSet::new(0);
        s.insert("a");
        s.insert("b");
        assert_eq!(s.to_vec(), ["b"]);
    }
}
