//! Data ingestion, synthetic data, training, evaluation and the tooling
//! around them.

pub mod ablate;
pub mod attention;
pub mod blob;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod synth;
pub mod train;

pub use ablate::{ablate, expected_probe_factor, zero_probe, AblationRow, AblationTable, ProbeRow};
pub use attention::dump_attention;
pub use blob::{read_blob, write_blob};
pub use checkpoint::{load_any_checkpoint, load_checkpoint, save_checkpoint, AnyCheckpoint, Checkpoint};
pub use config::TrainConfig;
pub use dataset::{load_dataset, Dataset, DatasetManifest};
pub use eval::{evaluate, evaluate_model};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use synth::{generate_synthetic, SyntheticSpec};
pub use train::{train, train_from, StepRecord, TrainOutcome};
