pub mod camera;
pub mod error;
pub mod gaussians;
pub mod imaging;
pub mod metrics;
pub mod scene_io;
pub mod sfm;
pub mod training;

pub use error::{Error, Result};
