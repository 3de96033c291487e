pub mod attention;
pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
