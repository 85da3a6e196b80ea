//! Metric suite: style recognition, Frechet distance, retrieval precision,
//! foot skating and diversity.
//!
//! Learned metrics use two small evaluators trained on the toy data: a
//! convolutional [`StyleClassifier`] (whose pooled features also serve as the
//! embedding space for FID and diversity) and a contrastive [`DualEncoder`]
//! for R-precision and MM-Dist. Numbers are comparable only within this crate.

mod metrics;
mod nets;
mod report;

pub use metrics::{
    diversity, fid, foot_skating, foot_skating_mean, foot_skating_world, mm_dist, r_precision, sra, Embedding, DIVERSITY_PAIRS,
    R_PRECISION_BATCH, SKATE_SPEED,
};
pub use nets::{
    content_prompt, style_label, train_classifier, train_dual_encoder, ClassifierConfig, DualConfig, DualEncoder, StyleClassifier,
    TrainedClassifier,
};
pub use report::{evaluate, EvalReport, Evaluators};
