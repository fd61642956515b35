//! Phase 2: shared transform, attention over seed centroids, and training.

pub mod attention;
pub mod model;
pub mod train;

pub use attention::{
    average_pooling, combine_similarity, global_attention, local_attention, local_attention_projected, lookalike_loss,
    lookalike_loss_from_logits, serving_score, serving_score_with_global, training_logit, training_score, transform,
    AttentionOutput, CombineWeights, GlobalAttentionParams, LocalAttentionParams, SeedsRepresentation, Similarity,
    TransformParams,
};
pub use model::{forward_batch, LookalikeBatch, LookalikeConfig, LookalikeModel, LookalikeSample, Pooling};
pub use train::{
    cluster_candidates, evaluate, recommend, seeds_representations, train_lookalike, write_metrics_csv, Campaign,
    Clustering, Evaluation, LookEpochMetrics, LookalikeOutput, LookalikeTrainConfig,
};
