pub mod baselines;
pub mod cli;
pub mod embeddings;
pub mod harness;
pub mod error;
pub mod numerics;
pub mod oracles;
pub mod rng;
pub mod sampler;
pub mod sra;

pub use error::{Result, SraError};
pub use numerics::Tensor;
