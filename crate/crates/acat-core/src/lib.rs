//! Core library for training small saliency-guided attention classifiers on
//! volumetric image data and for generating the counterfactual saliency maps
//! that drive them.
//!
//! The crate is split along the pipeline:
//!
//! * [`tensor`]: a define-by-run reverse-mode autodiff engine over dense f32
//!   tensors, with the handful of ops the models need (convolution, pooling,
//!   pointwise nonlinearities, losses) plus an optimizer and a finite
//!   difference checker.
//! * [`nets`]: layer/graph configuration, a slice-shared volume classifier,
//!   a small convolutional autoencoder and the training loops.
//! * [`attention`]: spatial attention masks computed from saliency maps, the
//!   mask fusion layer, slice attention and the combined attention model.
//! * [`counterfactual`]: gradient-based counterfactual search in the
//!   autoencoder latent space, the latent-shift baseline and the class
//!   agnostic saliency maps built from counterfactual pairs.
//! * [`saliency`]: saliency map containers and the gradient, integrated
//!   gradients and Grad-CAM baselines.
//! * [`synth`]: a synthetic low-contrast lesion dataset generator with region
//!   ground truth.
//! * [`eval`]: pointing game, IoU/Dice, classification metrics, layer
//!   variance probes, and the ablation/dropout-control experiment harness.
//!
//! Everything is deterministic given the seeds threaded through the public
//! APIs; no global RNG state is consulted anywhere. The crate is `no_std`
//! compatible (with `alloc`); the default `std` feature only selects the
//! float math implementation. IO lives in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod counterfactual;
pub mod eval;
mod math;
pub mod nets;
pub mod rng;
pub mod saliency;
pub mod synth;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
