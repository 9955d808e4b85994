//! Teacher-student self-supervised pretraining for grayscale radiograph
//! patches, with the surrounding pipeline: synthetic cohorts, patch tiling,
//! view augmentation, few-label fine-tuning and patient-level evaluation.

pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod evaluate;
pub mod image_io;
pub mod manifest;
pub mod nn;
pub mod patcher;
pub mod rng;
pub mod ssl;
pub mod synthgen;
pub mod types;

pub use error::{Error, Result};
