pub mod attacks;
pub mod data;
pub mod detect;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod protocol;
pub mod watermark;

pub use error::{Error, Result};
