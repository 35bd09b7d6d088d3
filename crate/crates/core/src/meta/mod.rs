//! Episodic meta-learning: sampling, scoring, loss, optimization and evaluation.

pub mod dataset;
pub mod episode;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use dataset::{Dataset, LabeledExample};
pub use episode::{sample_episode, Episode};
pub use eval::{evaluate, evaluate_with, EvalReport, ReportRow};
pub use loss::{batch_loss, episode_loss, predict_proba};
pub use model::{
    batch_grad, batch_loss_value, compute_prototypes, episode_grad, episode_scores, protonet_score,
    score_query, Context, KnowledgeBase, Model, ModelGrads,
};
pub use optim::{lr_schedule, AdamW};
pub use train::{train, MetricRecord, TrainOutcome};
