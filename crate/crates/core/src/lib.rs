pub mod baseline;
pub mod cli;
pub mod dataio;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod hyperopt;
pub mod image;
pub mod nn;
pub mod synthgen;
pub mod training;
pub mod twinvae;

pub use domain::Domain;
pub use error::{Error, Result};
pub use image::Image;
