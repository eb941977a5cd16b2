//! Activation-compressed training for small transformers.
//!
//! Forward passes run at full precision. The activations that backward
//! needs are stored as 8-bit codes with per-group scale and offset, and
//! a [`ledger::MemoryLedger`] accounts for the bytes they occupy.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod ledger;
pub mod model;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/groups.md")]
    mod groups {}
    #[doc = include_str!("../../../book/src/running-estimates.md")]
    mod running_estimates {}
    #[doc = include_str!("../../../book/src/storing-activations.md")]
    mod storing_activations {}
    #[doc = include_str!("../../../book/src/memory-ledger.md")]
    mod memory_ledger {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
