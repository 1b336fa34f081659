//! Hierarchical gated-attention CNN/ViT multi-branch classifier.

pub mod autograd;
pub mod canon;
pub mod dataio;
pub mod error;
pub mod explain;
pub mod gam;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod training;
pub mod real;
pub mod volume;

pub use ndarray;

pub use error::{HcvtError, Result};
pub use gam::{AttentionWeights, FeatureVector, GateParams};
pub use model::{Model, ModelConfig, Prediction, Sample, Variant};
pub use real::Real;
pub use volume::{Sequence, Volume};
