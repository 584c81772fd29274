//! Training, evaluation, checkpoints and reports.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod export;
pub mod optim;
pub mod report;
pub mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{
    load_files, load_split, AttributionRefresh, Augmentation, DataSource, FilePair, FileSet, Objective, RunConfig,
    DATA_DIR_ENV,
};
pub use eval::{eval_corruption, eval_detection, fit_linear_probe, linear_probe, Scorer};
pub use export::{activated_fraction, export_maps, ExportOptions, DEFAULT_THRESHOLDS};
pub use optim::{adam_step, cosine_lr, Adam};
pub use report::{DetectionSummary, Report, TrialDetection};
pub use train::{train, TrainLog, TrainOutcome, Trainer};
