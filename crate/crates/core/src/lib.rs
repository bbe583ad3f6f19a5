//! Semi-supervised segmentation with conservative/radical inconsistency
//! masks and separate self-training of certain and uncertain regions.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod uncertainty;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
