//! Layout-aware graph attention encoder for document understanding:
//! region embeddings, top-k spatial neighborhoods, gated visual fusion,
//! masked sentence pre-training and classification heads, on a small
//! reverse-mode autodiff core.

pub mod autodiff;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod io;
pub mod layout;
pub mod model;
pub mod neighborhood;
pub mod optim;
pub mod pretrain;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Registry64 = autodiff::ParameterRegistry<f64>;
pub type Registry32 = autodiff::ParameterRegistry<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type PreparedDocument64 = model::PreparedDocument<f64>;
pub type PreparedDocument32 = model::PreparedDocument<f32>;
