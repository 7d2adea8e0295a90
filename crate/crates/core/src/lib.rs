//! Synthetic multi-image visual question answering: scene and question
//! generation, a differentiable proposal counter, a small attention fusion
//! model with hand-derived gradients, training schedules and bias audits.

pub mod counting;
pub mod dataset;
pub mod error;
pub mod evalstats;
pub mod geometry;
pub mod labels;
pub mod model;
pub mod qgen;
pub mod scenes;
pub mod traincore;
pub mod training;

pub use error::{Error, Result};
