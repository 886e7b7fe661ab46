pub mod bboxreg;
pub mod bench;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod formats;
pub mod geometry;
pub mod mask;
pub mod model;
pub mod segfeat;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
