//! Contralaterally enhanced detection.
//!
//! A disease proposal in a chest radiograph is compared against the mirrored
//! region on the other side of the spine. The crate covers every stage of
//! that inference path at desk scale:
//!
//! 1. [`geometry`]: spine line from a segmentation mask, reflection of a
//!    proposal across it, and expansion of the reflected patch.
//! 2. [`transform`]: affine refinement parameters and the canonical-patch to
//!    image transform, with analytic Jacobians.
//! 3. [`tensorops`]: bilinear sampling (forward and backward) and RoI max
//!    pooling over channel-major feature maps.
//! 4. [`fusion`]: additive/subtractive feature merge and the two-layer
//!    prediction head, with training.
//! 5. [`pipeline`]: fully and weakly supervised inference with NMS.
//! 6. [`evaluation`]: AP variants, localization accuracy, confusion
//!    matrices, segmentation metrics and the Wilcoxon signed-rank test.
//! 7. [`harness`]: file formats, synthetic symmetric scenes and the
//!    ablation experiment.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod pipeline;
pub mod tensorops;
pub mod transform;

pub use error::{CenError, Result};
pub use geometry::{BinaryMask, BoundingBox, Point2, RotatedRect, SpineLine};

pub use pipeline::{Detection, Proposal};
pub use tensorops::{FeatureMap, FeatureVector};
pub use transform::{AffineTransform, CanonicalSize, StnParams};
