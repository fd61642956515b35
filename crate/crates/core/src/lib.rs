//! Look-alike audience extension with attention over clustered seed users.
//!
//! The crate covers both offline training phases and the online path:
//!
//! * [`representation`]: multi-field user tower with an attention-merge
//!   layer, trained with rank-based negative sampling.
//! * [`lookalike`]: shared transform plus global and local attention over
//!   clustered seed users.
//! * [`clustering`]: k-means producing the per-candidate seed centroids.
//! * [`serving`]: click ingestion, periodic re-clustering and scoring behind
//!   an atomically swapped snapshot.
//! * [`evalgen`]: offline metrics and a synthetic world generator.

pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod evalgen;
pub mod lookalike;
pub mod numeric;
pub mod representation;
pub mod serving;
pub mod store;

pub use error::{Error, Result};

/// Book chapters compiled as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub mod pipeline {}
    #[doc = include_str!("../../../book/src/representation.md")]
    pub mod representation {}
    #[doc = include_str!("../../../book/src/lookalike.md")]
    pub mod lookalike {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    pub mod clustering {}
    #[doc = include_str!("../../../book/src/serving.md")]
    pub mod serving {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/formats.md")]
    pub mod formats {}
}
