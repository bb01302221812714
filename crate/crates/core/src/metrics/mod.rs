//! VPQ, STQ, association accuracy and multi-scale merging.

pub mod merge;
pub mod report;
pub mod stq;
pub mod vpq;

pub use merge::{merge_logits, multi_scale_merge, resize_bilinear, ScalePrediction};
pub use report::{MetricReport, VideoMetrics};
pub use stq::{association_accuracy, association_counts, stq};
pub use vpq::{round1, vpq_k, vpq_mean, VPQ_WINDOWS};
