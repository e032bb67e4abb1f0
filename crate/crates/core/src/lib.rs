//! Isolated sign recognition on a four-encoder video/keypoint network with
//! gloss-aware soft labels and gloss/feature mixing.

pub mod config;
pub mod error;
pub mod eval;
pub mod glosslex;
pub mod heads;
pub mod heatmap;
pub mod model;
pub mod synthdata;
pub mod trainer;
pub mod vknet;

pub use error::{Error, Result};
