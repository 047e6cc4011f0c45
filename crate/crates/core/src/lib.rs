pub mod error;
pub mod rng;
pub mod trajectory;
pub mod tokens;
pub mod model;
pub mod forward;
pub mod backward;

pub use error::{Error, Result};
