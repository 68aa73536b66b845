//! Night-to-day translation for fixed-camera surveillance scenes.
//!
//! The pipeline feeds a learnable mixture of photometric color invariants to a
//! ResNet-style generator, splits feature maps into background and foreground
//! with an element-wise Pearson similarity against an empty-scene reference,
//! and trains with background regression, a disentangled contrastive loss and
//! a least-squares adversarial loss.

pub mod color_invariants;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod feature_extractor;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod weights;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor, Var};
