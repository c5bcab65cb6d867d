pub mod engine;
pub mod error;
pub mod exits;
pub mod harness;
pub mod ledger;
pub mod mamba;
pub mod model;
pub mod numkernel;
pub mod params;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
