//! Negative feature tuning for out-of-distribution detection in embedding space.
//!
//! Pre-extracted, L2-normalized text features for the ID labels and for a set of
//! mined negative labels are adapted by image-conditional element-wise
//! scale/shift transforms. Training combines an ID classification loss, an OOD
//! detection loss on outlier crops, and a knowledge-regularization term that
//! keeps tuned features close to the pre-trained ones. Scoring follows the
//! NegLabel ratio with the tuned features substituted in.
//!
//! Module map:
//! - [`numerics`]: dense kernels (normalization, cosine, log-sum-exp, softmax).
//! - [`model`]: learnable parameters, the meta-network and the feature transform.
//! - [`objectives`]: losses, analytic gradients and the finite-difference oracle.
//! - [`gradcheck`]: seeded instances for checking analytic gradients.
//! - [`trainer`]: AdamW, batching and the training loop.
//! - [`scoring`]: OOD scores, the threshold detector and ROC metrics.
//! - [`mining`]: negative-label mining and crop selection.
//! - [`data`]: `FBNK` banks, JSONL manifests and the synthetic dataset generator.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mining;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{FeatureBank, ModelState, Role, TransformMode};
pub use numerics::Mat;
