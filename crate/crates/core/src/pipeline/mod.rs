//! Synthetic scenes, the two-stage detector, training and inference.

pub mod config;
pub mod detector;
pub mod experiment;
pub mod refine;
pub mod rpn;
pub mod scene;
pub mod train;

pub use config::{AblationConfig, AblationFlags, Config, InferConfig, RefineConfig, RpnConfig, SceneGenConfig, TrainConfig};
pub use scene::{generate_scene, read_scene, write_scene, SceneSample};
