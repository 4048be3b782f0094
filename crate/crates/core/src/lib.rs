//! Planar 3D transfer learning for volumetric segmentation.
//!
//! 2D convolution weights are lifted into planar 3D kernels (depth extent 1) and
//! used as the encoder of a residual U-Net that segments scans through
//! overlapping depth windows.

pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
