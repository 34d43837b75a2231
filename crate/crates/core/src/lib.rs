//! Multivariate time-series classification with multi-view features and
//! selective state-space sequence models.

pub mod autodiff;
pub mod binio;
pub mod config;
pub mod copying;
pub mod dataio;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod optim;
pub mod params;
pub mod scanning;
pub mod spectral;
pub mod ssm;
pub mod temporal;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, TapeTensor};
pub use error::{Error, Result};
pub use params::{GradStore, ParamId, ParamStore};
pub use tensor::Tensor;
