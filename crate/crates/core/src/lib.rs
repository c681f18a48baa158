pub mod config;
pub mod data;
pub mod emd;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kv;
pub mod losses;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
