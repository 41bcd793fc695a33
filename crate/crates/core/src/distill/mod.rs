//! Self-distillation of a frozen teacher into an adapter-equipped student.

mod adam;
mod config;
mod crops;
mod gradsuite;
mod losses;
mod refine;
mod roi;
mod train;

pub use adam::Adam;
pub use config::{AdamConfig, CropConfig, LossWeights, RefineConfig};
pub use crops::{sample_crops, CropSpec};
pub use gradsuite::{run_grad_suite, GradCase, GradSuiteConfig, GradSuiteReport, SUITE_TARGETS};
pub use losses::{
    assign_registers, info_nce, info_nce_rows, loss_regular, loss_spurious, loss_uniformity,
};
pub use refine::{checkpoint_path, refine, refine_until, steps_per_epoch, RefineState, RunOutput};
pub use roi::{roi_align, roi_weights};
pub use train::{objective, train_step, LossReport, Objective};
