pub mod data;
pub mod encoder;
pub mod error;
pub mod hyperbolic;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod protocol;

pub use error::{Error, FormatError, Result};
