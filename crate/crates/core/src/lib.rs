pub mod autograd;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod registry;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod training;

pub use dataset::{CaseSample, DatabaseManifest, Manifest};
pub use error::{Error, ErrorKind, Result};
pub use registry::{ModalityRegistry, ModalitySet};
pub use tensor::{Real, Shape, Tensor};
