pub mod bench;
pub mod cl;
pub mod error;
pub mod fno;
pub mod metrics;
pub mod ood;
pub mod taskgen;
pub mod tensor;

pub use error::{Error, Result};
