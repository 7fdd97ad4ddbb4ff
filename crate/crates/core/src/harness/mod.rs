//! Synthetic data, training, inference, evaluation and the experiment grids
//! behind the command-line tool.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod model;
pub mod scene;
pub mod train;

pub use config::RunConfig;
pub use eval::{evaluate, mean_ap, mean_ap_at, subset_recall, ApRow, FrameResult, DISTANCES};
pub use model::{prepare_scene, prepare_window, Model, ModelConfig, PreparedFrame, Sample};
pub use scene::{generate_scene, ObjectSpec, Scene, SceneDistribution, SceneSpec, Waypoint};
pub use train::{detect, format_curve, train, EpochStats, TrainOptions};
