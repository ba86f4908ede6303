//! Analog meter reading by detecting pointers as 2D vectors.
//!
//! A small fully-convolutional network predicts a single-channel tip
//! heatmap and a two-channel direction map. Local maxima of the heatmap
//! give pointer tips; the direction map sampled at each tip gives the
//! tail-to-tip unit vector. Detected vectors are read against template
//! scale geometry by ray casting and linear interpolation.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`], [`ops`], [`graph`], [`optim`]: `f64` tensors, the
//!   differentiable op set, reverse-mode gradients and Adam.
//! - [`model`]: encoder, three deconvolution stages, heatmap and direction heads.
//! - [`targets`]: patch cropping, augmentation and groundtruth maps.
//! - [`decode`]: peak finding and vector extraction.
//! - [`train`]: scheduled two-term loss and the training loop.
//! - [`metrics`]: keypoint and direction similarity, AP/AR, input perturbations.
//! - [`pipeline`]: box assignment, homography, ray/scale intersection, readings.
//! - [`synth`]: procedural dial renderer and COCO-style annotation I/O.
//! - [`data`]: rendered datasets on disk and in memory, meter patches.
//! - [`eval`]: end-to-end detection, scoring and reading over a dataset.

pub mod data;
pub mod decode;
pub mod eval;
pub mod exec;
pub mod geom;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod train;

pub use exec::ExecMode;
pub use tensor::{ConvParams, Tensor, TensorError};
