//! Data ingestion, synthetic data, training, evaluation and analysis.

pub mod analyze;
pub mod config;
pub mod eval;
pub mod io;
pub mod synth;
pub mod train;

pub use analyze::{analyze, Analysis, AnalysisReport};
pub use config::Config;
pub use eval::{evaluate, EvalReport};
pub use io::{load_dataset, load_dataset_dir, write_dataset, Dataset, PredictionRecord};
pub use synth::{generate_synthetic, SynthConfig};
pub use train::{load_checkpoint, save_checkpoint, train, TrainOptions, TrainOutcome};
