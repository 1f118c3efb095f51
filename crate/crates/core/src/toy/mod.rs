//! The synthetic detection task: scenes, a patch encoder, training and AP.

pub mod eval;
pub mod experiments;
pub mod model;
pub mod optim;
pub mod scene;
pub mod train;

pub use eval::{evaluate_ap, ApReport, Detection};
pub use model::{Detector, ModelConfig};
pub use scene::{generate_scene, scene_at, Scene, SceneConfig, Split};
pub use train::{evaluate, train, train_with, ExperimentConfig, MetricRecord, TrainConfig, TrainOutcome};
