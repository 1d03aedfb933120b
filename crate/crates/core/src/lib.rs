pub mod augment;
pub mod autodiff;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod runner;
pub mod signal;

pub use error::{Error, Result};
