//! Asynchronous fusion of event streams and sparse LiDAR into dense depth maps
//! predicted both before and after each event window.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod losses;
pub mod network;
pub mod representations;
pub mod synthetic;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
