pub mod datagen;
pub mod alignment;
pub mod closedform;
pub mod entropic;
pub mod error;
pub mod experiments;
pub mod models;
pub mod numerics;
pub mod oracle;
pub mod stats;
pub mod symmetry;
pub mod trainer;

pub use datagen::{Batch, BatchSource, DataModel, FixedDataset};
pub use error::{Error, Result};
pub use models::{Activation, Architecture, LayerGradients, Network, ParamLayout, ParamVector};
pub use numerics::{Matrix, Rng, SvdResult};
pub use stats::Estimate;
