//! Data, training, evaluation and sweep plumbing behind the CLI.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod train;

pub use ablate::{ablate, ablation_csv, AblationMatrix, AblationRow};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Bundle, SyntheticSpec};
pub use gradcheck::{gradcheck, gradient_errors, GradcheckReport};
pub use train::{
    evaluate, learning_rate, load_dataset, load_path, train, MetricsRecord, TrainOutcome,
};
