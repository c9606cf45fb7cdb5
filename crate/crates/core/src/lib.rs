pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dcp;
pub mod error;
pub mod haze_model;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod report;
pub mod trainer;
pub mod vgg;

pub use error::{Error, Result};
