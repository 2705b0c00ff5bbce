pub mod autodiff;
pub mod class_stats;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod orchestrator;
pub mod partition;
pub mod ring;
pub mod seeds;

pub use error::{Error, Result};
