pub mod control;
pub mod costnet;
pub mod error;
pub mod harness;
pub mod meta;
pub mod seeds;
pub mod sensor;
pub mod terrain;
pub mod vehicle;

pub use error::{CheckpointError, Error, Result};
