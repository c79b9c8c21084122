pub mod error;
pub mod graph;
pub mod rng;

pub use error::{Error, Result};
pub mod augment;
pub mod diffmath;
pub mod encoder;
pub mod eval;
pub mod objective;
pub mod pipeline;
pub mod selfexpr;
