//! Multi-task Transformer U-Net for joint lesion segmentation and classification.
//!
//! Segmentation tokens and a classification token share one Transformer
//! encoder. Training combines mask, level-set and class supervision with two
//! consistency terms (level-set/mask agreement and attended-region agreement)
//! so classification-only images still inform the segmentation branch.

pub mod data;
pub mod diffcore;
pub mod engine;
pub mod error;
pub mod exec;
pub mod gradsuite;
pub mod levelset;
pub mod losses;
pub mod model;

pub use error::{Error, Result};
