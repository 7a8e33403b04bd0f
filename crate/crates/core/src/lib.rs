//! Discrete-event simulation of the Linux page cache for predicting the I/O
//! times of data-intensive applications.

pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod page_cache;
pub mod scenario;
pub mod sim;
pub mod storage;
pub mod workload;

pub use error::{Result, SimError};
