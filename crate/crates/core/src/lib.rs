pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod harness;
pub mod heads;
pub mod pointcloud;
pub mod semantics;
pub mod training;

pub use error::{Error, Result};
