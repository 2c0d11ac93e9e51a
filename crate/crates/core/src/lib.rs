//! Iterative, instruction-driven canvas editing with a conditional GAN that
//! reasons about the visual increment between consecutive canvases.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod gancore;
pub mod model;
pub mod nn;
pub mod scenegen;
pub mod service;
pub mod training;

pub use checkpoint::{Checkpoint, CheckpointManifest, CheckpointMeta};
pub use error::{Error, Result};
pub use evalkit::{Detection, Detector, EvalReport, Localizer, TemplateDetector};
pub use model::{Ablation, Model, ModelConfig, RolloutState};
