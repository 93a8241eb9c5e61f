//! Dual-time-point computer-aided detection of brain metastases.
//!
//! This crate implements the full pipeline at desk scale: synthetic head
//! phantoms with ground-truth lesions, mutual-information affine
//! registration between examinations, an early-fusion U-Net over axial
//! slice slabs, lesion-wise detection evaluation, and paired nonparametric
//! statistics over the experiment matrix.
//!
//! The accompanying guide under `book/` walks through each subsystem; its
//! code snippets compile and run as doc-tests of this crate.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod case;
pub mod nn;
pub mod overlay;
pub mod phantom;
pub mod registration;
pub mod stats;
pub mod training;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
