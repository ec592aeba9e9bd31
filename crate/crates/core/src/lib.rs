pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod msfusion;
pub mod nn;
pub mod tensor;
pub mod transunet;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
