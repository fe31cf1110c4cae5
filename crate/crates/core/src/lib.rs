//! PiNet models and the ToyShapes / ToyFloods experiments around them.

pub mod checkpoint;
pub mod error;
pub mod gradcam;
pub mod layers;
pub mod mars;
pub mod pinet;
pub mod rng;
pub mod segmentation;
pub mod toyshapes;
pub mod training;

pub use error::{CoreError, Result};
