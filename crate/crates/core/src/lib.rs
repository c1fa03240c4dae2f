pub mod cli;
pub mod error;
pub mod fpcodec;
pub mod galt;
pub mod hadamard;
pub mod hwemu;
pub mod quant;
pub mod synth;
pub mod tensorio;

pub use error::{Error, Result};
pub use fpcodec::{FpCode, FpFormat, Grid};
