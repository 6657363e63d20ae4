pub mod autodiff;
pub mod checkpoint;
pub mod comm;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod infocomp;
pub mod nn;
pub mod policy;
pub mod train;

pub use error::{Error, Result};
