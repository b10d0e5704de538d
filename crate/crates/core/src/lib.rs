#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod numc;

pub use error::{Error, Result};
pub mod qsim;
pub mod ansatz;
pub mod qpr;
pub mod train;
pub mod margin;
pub mod discrim;
pub mod embed;
pub mod ingest;
pub mod analyze;
pub mod cli;
