pub mod attacks;
pub mod cayley;
pub mod circulant;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::{CTensor, Tensor};
