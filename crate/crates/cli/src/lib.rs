//! Command-line harness: verification suites, benchmarks, the recall trainer,
//! decoding and the tensor/config/report file formats.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod tensor_io;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use report::{Bound, Report, Status};
