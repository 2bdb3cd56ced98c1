pub mod ann;
pub mod checkpoint;
pub mod cli;
pub mod ensemble;
pub mod error;
pub mod expert;
pub mod harness;
pub mod hyperopt;
pub mod kernels;
pub mod linalg;
pub mod lvm;
pub mod metrics;
pub mod optim;
pub mod streams;

pub use error::{Error, Result};
