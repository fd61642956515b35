//! Phase 1: the universal user representation.

pub mod sampling;
pub mod tower;
pub mod train;

pub use sampling::{
    build_training_batches, collect_positives, item_ranks, negative_sampling_distribution, NegativeSampler,
    SamplingLimits, TrainingExample, UserPositives,
};
pub use tower::{
    attention_merge, concat_merge, embed_field, representation_loss, FieldEmbedding, MergeMode, MergeOutput,
    RepresentationModel, TowerConfig, TowerLayout,
};
pub use train::{
    embed_users, train_representation, write_metrics_csv, RepEpochMetrics, RepresentationData, RepresentationOutput,
    RepresentationTrainConfig,
};
