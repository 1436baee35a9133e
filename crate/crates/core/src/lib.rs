//! Composed object retrieval: the region-embedding and fusion model, its
//! losses and metrics, a synthetic shape world, and the annotation pipeline.

pub mod avti;
pub mod backbones;
pub mod baseline;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod rre;
pub mod train;
pub mod verify;

pub use error::{CorError, Result};
pub use model::{Ablation, CoreModel, Expression, ModelConfig};
pub use numerics::Tensor;
