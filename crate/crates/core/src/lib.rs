//! Multi-scale object detection from scratch: LSKA attention, a
//! gather-and-distribute neck, a MultiSEAM head, and the evaluation,
//! data and training plumbing around them.

pub mod backbone;
pub mod boxes;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gd_neck;
pub mod lska;
pub mod nn;
pub mod seam_head;
pub mod train;
pub mod verify;
pub mod zoo;

pub use boxes::{iou, BBox, DetBox, GtBox};
pub use error::{Error, Result};
pub use zoo::{build, Model, ModelConfig, ModelVariant};
