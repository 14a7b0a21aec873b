pub mod attention;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod model;
pub mod params;
pub mod patch;
pub mod rig;
pub mod runtime;
pub mod train;

pub use error::{Error, Result};
pub use mvinpaint_tensor as tensor;
