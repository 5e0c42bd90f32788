//! Configuration, training, evaluation and inference.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod train;

pub use checkpoint::{Checkpoint, Phase};
pub use config::{Preset, RunConfig, TrackOccupancy};
pub use eval::{evaluate, export_viz, infer, load_model, run_eval, InferOutput};
pub use model::Model;
pub use train::{train_detection, train_joint, EpochLog, Jitter, RunFlags, TrainOutcome};
