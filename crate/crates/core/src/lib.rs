pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod diagnostics;
pub mod heads;
pub mod oracle;
pub mod schedule;
pub mod solvers;
pub mod training;
