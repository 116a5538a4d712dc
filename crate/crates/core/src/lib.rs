pub mod artifact;
pub mod data;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod nn;
pub mod numdiff;
pub mod pooling;
pub mod projection;
pub mod ranking;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
