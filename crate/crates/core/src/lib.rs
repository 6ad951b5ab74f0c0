pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod interpolant;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod teacher;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
