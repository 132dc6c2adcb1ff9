//! Multifactor stochastic volatility with jumps for carbon futures: realized
//! measures from intraday trades, HAR auxiliary regressions, indirect-inference
//! estimation, and Fourier pricing of futures options under a risk-premium kernel.

pub mod error;
pub mod har;
pub mod indirect;
pub mod ingest;
pub mod optim;
pub mod pipeline;
pub mod pricing;
pub mod realized;
pub mod sim;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
