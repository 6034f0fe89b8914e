//! Domain-adaptive two-stage shape detector, desk scale.
//!
//! A small CNN detector trained on a synthetic two-domain dataset with
//! adversarial feature alignment at the image, RPN and instance levels:
//! entropy attention over fused multi-scale features, transferability-
//! re-weighted proposal filtering, and dynamically sized target instance
//! sampling. Everything runs on a hand-rolled reverse-mode autodiff
//! substrate so gradients stay checkable against finite differences.

pub mod ablation;
pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod geometry;
pub mod head;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod rpn;
pub mod tensor;
pub mod trainer;

pub use autodiff::{backprop, gradient_reversal, sgd_momentum_step, GrlConfig, Param, Var};
pub use error::{Error, Result};
pub use ops::RoiBox;
pub use tensor::{Element, Tensor};
