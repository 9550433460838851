pub mod blur_synth;
pub mod cli;
pub mod error;
pub mod gradsuite;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
