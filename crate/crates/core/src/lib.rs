//! Desk-scale workbench for comparing cardiac MR segmentation training
//! strategies: per-disease batch scheduling vs. pooled batches, with and
//! without multiplicative occlusion of the training images.
//!
//! The crate covers the full loop: synthetic multi-disease phantom
//! generation, dataset restructuring into 2D slice samples, occlusion mask
//! sampling, encoder-decoder model with hand-rolled reverse-mode gradients,
//! Adam training over the four strategy arms, and Dice/Hausdorff evaluation
//! with cross-dataset validation.

pub mod config;
pub mod data;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod report;
pub mod sampler;
pub mod train;
pub mod util;

pub use config::RunConfig;
pub use data::{Case4D, DiseaseDataset, DiseaseKey, Manifest, Phase, SliceSample};
pub use error::{CoreError, Result};
pub use mask::{MaskKind, MaskRealization, MaskSpec};
pub use metrics::{BinaryMask, ContourSet, MetricsTable};
pub use model::{ModelConfig, PredictionMap, SegNet};
pub use sampler::{BatchPlan, Strategy, SubBatch};
pub use train::{Arm, RunHistory, TrainConfig};
