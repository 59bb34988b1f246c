//! Training stages, evaluation, and checkpoints.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod stage2;

pub use align::{
    evaluate_heldout, run_align, train_align, train_align_with, AlignOutcome, Encoded, HeldoutReport, Lab, PromptSet,
    StepRecord,
};
pub use checkpoint::{hash_file, Checkpoint};
pub use config::{PipelineMode, RunConfig, TimestepMode};
pub use metrics::{cosine, pr_metric, ssim, MetricSpec, PrReport};
pub use optim::AdamW;
pub use report::{ablate, evaluate_checkpoint, modality_gap_report, sample_prompt, AblationAxis, AblationReport, GapReport};
pub use stage2::{load_stage1, train_lightcontrol, train_lora, Stage2Outcome, Stage2Summary};
