pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod learner;
pub mod metalearn;
pub mod model;
pub mod params;
pub mod tasks;
pub mod ulr;

pub use error::{Error, Result};
