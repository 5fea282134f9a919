pub mod data;
pub mod error;
pub mod inference;
pub mod kv;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
