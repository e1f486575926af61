pub mod adapters;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod params;
pub mod scenes;
pub mod tensor;
pub mod textbank;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
