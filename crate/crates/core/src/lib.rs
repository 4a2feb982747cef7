//! Class-adaptive augmentation policy engine for time-series classification.
//!
//! The crate provides a small autodiff tensor core, a registry of signal
//! transforms with differentiable magnitude paths, desk-scale 1-D CNN
//! backbones, a per-sample augmentation policy network with its search
//! objective, class-dependent no-augmentation regulation, saliency-driven
//! information-region protection, paired-run bias metrics, and the experiment
//! pipeline (datasets, search/train phases, baselines, sweeps, reports).

pub mod backbone;
pub mod ckpt;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod info_region;
pub mod metrics;
pub mod regulation;
pub mod policy;
pub mod tensor;
pub mod transforms;

pub use backbone::{Arch, Backbone};
pub use data::{Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use pipeline::{PolicySource, RunConfig, TrainOptions};
pub use info_region::RegionConfig;
pub use metrics::{BiasConfusion, PredictionRecord, Swise};
pub use policy::{Policy, PolicyNetwork, SearchConfig};
pub use regulation::RegulationState;
pub use tensor::{AdamW, Gradients, LrSchedule, Tape, Tensor, Var};
pub use transforms::{RngStream, Signal, TransformId};
