pub mod curation;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod generator;
pub mod image;
pub mod losses;
pub mod mask_ops;
pub mod nn;
pub mod optimizer;
pub mod pipeline;
pub mod weights;

pub use error::{Error, Result};
