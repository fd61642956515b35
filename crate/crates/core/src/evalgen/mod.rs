//! Offline metrics and the synthetic world generator.

pub mod metrics;
pub mod world;

pub use metrics::{
    auc, auc_samples, diversity, gini, prec_at_k, random_prec_at_k, DiversityReport, EvalSample, ItemTaxonomy,
    ReadEvent,
};

pub use world::{generate_world, FieldSpec, ItemTruth, Truth, UserTruth, World, WorldSpec};
