//! Attention-mask change detection for small objects.
//!
//! A live image is compared against a window of reference images taken from
//! nearby viewpoints. Patch descriptors are matched and geometrically verified
//! against every reference frame; cells verified in all frames form a binary
//! attention mask that gates a pixel-wise change score computed after warping
//! the paired reference onto the live view.

pub mod attention;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod patch_features;
pub mod pipeline;
pub mod warping;

mod binfmt;
mod par;

pub use error::{Error, Result, Shape};
pub use par::is_parallel;
