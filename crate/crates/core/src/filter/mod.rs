//! Spurious-token detectors and the training-time filter.

mod detect;
mod hijack;
mod partition;
mod thresholds;
mod training;

pub use detect::{
    detect_by_register, detect_fixed_pattern, detect_global_proxy, detect_hijackee_abs,
    detect_hijackee_rel,
};
pub use hijack::{hijack_scores, HijackScores};
pub use partition::{build_partition, PartitionReport, SpuriousPartition};
pub use thresholds::Thresholds;
pub use training::{composite_regions, training_filter, FilterOutput};
