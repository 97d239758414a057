//! Small-sample cross-domain CT segmentation.
//!
//! A sequence attention U-Net segments the center slice of a stack of
//! adjacent axial CT slices. The toolkit covers the full workflow: volume
//! containers and dataset manifests, domain-specific preprocessing recipes,
//! supervised pretraining on a large source domain, adversarial feature
//! adaptation and fine-tuning on a small target domain, cross-validated
//! evaluation, and a synthetic benchmark generator for end-to-end checks.
//!
//! Numeric kernels are generic over the floating-point scalar via
//! [`scalar::Scalar`]; the type aliases at the crate root pin the default
//! precision used by the CLI.

pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod synth;
pub mod training;
pub mod scalar;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the CLI and the shipped tooling.
pub type DefaultScalar = f32;

/// Segmenter parameters at the default precision.
pub type SeqUnetParams = model::SeqUnetParams<DefaultScalar>;
/// Discriminator parameters at the default precision.
pub type DiscriminatorParams = model::DiscriminatorParams<DefaultScalar>;
