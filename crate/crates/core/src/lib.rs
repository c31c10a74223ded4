pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod latent;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod thermal;

pub use error::{Error, Result};
pub use tensor::Tensor;
