//! Multimodal world-model agent: a recurrent state-space model over image
//! and token streams, an actor-critic trained in latent imagination, and
//! the runtime that ties them to environments.
//!
//! Numeric code is generic over [`Scalar`]; training uses `f32`, gradient
//! checks use `f64`.

pub mod checkpoint;
pub mod codecs;
pub mod diff;
pub mod error;
pub mod nn;
pub mod policy;
pub mod runtime;
pub mod scalar;
pub mod worldmodel;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = diff::Tensor<f32>;
pub type Tensor64 = diff::Tensor<f64>;
pub type Graph32 = diff::Graph<f32>;
pub type Graph64 = diff::Graph<f64>;
pub type ParamStore32 = diff::ParamStore<f32>;
pub type ParamStore64 = diff::ParamStore<f64>;
pub type Agent32 = runtime::Agent<f32>;
pub type Agent64 = runtime::Agent<f64>;
pub type Trainer32 = runtime::Trainer<f32>;
pub type Trainer64 = runtime::Trainer<f64>;
