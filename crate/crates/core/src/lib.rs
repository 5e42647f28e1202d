pub mod data;
pub mod error;
pub mod factorization;
pub mod hashindex;
pub mod linalg;
pub mod matching;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
