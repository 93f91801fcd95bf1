pub mod checkpoint;
pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod trainer;

pub use error::{Error, Result};
