//! Cross-domain few-shot segmentation: per-image self-matching feature
//! transforms, dual foreground/background 4D correlations, a small
//! hand-differentiated fusion network, and test-time self-finetuning.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod dhc;
pub mod episodes;
pub mod error;
pub mod features;
pub mod fusion;
pub mod netpbm;
pub mod objectives;
pub mod rng;
pub mod smt;
pub mod tensor;

mod conv;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use features::{ExtractorMode, FeatureExtractor, FeaturePyramid, Group, Image, PyramidSpec};
pub use tensor::Tensor;
