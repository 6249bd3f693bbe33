//! Weighted bilinear coding over salient part masks.
//!
//! A small, deterministic feature-aggregation and metric-learning library:
//! convolutional feature maps are pooled into second-order (bilinear) codes,
//! optionally weighted by learned salient part masks, embedded, concatenated
//! and ℓ2-normalized into a retrieval feature. Training minimizes a triplet
//! ranking loss with SGD; retrieval quality is reported as a CMC curve and
//! mean average precision.
//!
//! Every backward pass is hand-derived and certified against a central
//! finite-difference oracle (see [`gradcheck`]). All reductions run in a
//! fixed ascending-index order so results are bit-reproducible given a seed.
//!
//! The numeric core is generic over the scalar type through [`Scalar`]
//! (implemented for `f32` and `f64`); gradient certification always runs in
//! double precision.

pub mod aggregation;
mod backbone;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod partnet;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use aggregation::{BilinearCode, EmbeddingParams, FinalFeature};
pub use model::{ModelConfig, ModelParams, RasterSample, Variant};
pub use partnet::{PartMask, PartNetParams};
pub use tensor::{Matrix, Tensor3};

/// Single-precision concrete aliases.
pub type Tensor3F32 = Tensor3<f32>;
pub type MatrixF32 = Matrix<f32>;
pub type FinalFeatureF32 = FinalFeature<f32>;
pub type ModelParamsF32 = ModelParams<f32>;

/// Double-precision concrete aliases (used by the CLI and all oracles).
pub type Tensor3F64 = Tensor3<f64>;
pub type MatrixF64 = Matrix<f64>;
pub type FinalFeatureF64 = FinalFeature<f64>;
pub type ModelParamsF64 = ModelParams<f64>;
