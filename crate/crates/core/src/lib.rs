//! Multi-scale and cross-scale supervised contrastive losses for dense
//! prediction, on a small define-by-run autodiff engine, with a toy
//! segmentation network to host them.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod labels;
pub mod losses;
pub mod mem;
pub mod nn;
pub mod projector;
pub mod sampler;
pub mod segnet;

pub use error::{Error, Result};
