//! Synthetic data, file formats, training and the end-to-end pipeline.

pub mod checkpoint;
pub mod config;
pub mod detect;
pub mod gradcheck;
pub mod io;
pub mod labels;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use detect::{apply_selection, detect, DetectOutput, Detector, SelectionMode};
pub use labels::{assign_candidate_labels, best_gt};
pub use synth::{gen_synthetic, GtLine, Scene, SceneMode};
pub use train::{train_toy, LogEntry, Stage, TrainLog, Trained};
