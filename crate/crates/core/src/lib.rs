//! Multiple-instance ranking for weakly supervised anomaly scoring.
//!
//! Videos are bags of segment features. A small fully connected scorer maps
//! each segment to an abnormality score in (0, 1) and is trained from
//! video-level labels only, by ranking the top scores of abnormal videos
//! above the top scores of normal ones.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command line tool.

pub mod dataset;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod ranking_loss;
pub mod scalar;
pub mod scorer;
pub mod seeding;
pub mod trainer;

pub(crate) mod binio;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision scorer, matching the on-disk model format.
pub type ScorerParamsF32 = scorer::ScorerParams<f32>;
pub type ScorerParamsF64 = scorer::ScorerParams<f64>;
pub type BagF32 = dataset::Bag<f32>;
pub type BagF64 = dataset::Bag<f64>;
pub type BagSetF32 = dataset::BagSet<f32>;
pub type BagSetF64 = dataset::BagSet<f64>;
pub type GradientF32 = scorer::Gradient<f32>;
pub type GradientF64 = scorer::Gradient<f64>;
pub type LossBreakdownF64 = ranking_loss::LossBreakdown<f64>;
