pub mod attention;
pub mod denoiser;
pub mod error;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
