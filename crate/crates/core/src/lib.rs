pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod diffengine;
pub mod divergences;
pub mod evalsuite;
pub mod gaussians;
pub mod model;
pub mod objectives;
pub mod protocol;
pub mod scalar;
pub mod trainer;
pub mod verify;

pub use scalar::Scalar;

/// Single-precision instantiations, used for training.
pub type Tensor32 = diffengine::Tensor<f32>;
pub type Gaussian32 = gaussians::DiagGaussian<f32>;
pub type Model32 = model::MultimodalVAE<f32>;

/// Double-precision instantiations, used by the oracles and evaluation.
pub type Tensor64 = diffengine::Tensor<f64>;
pub type Gaussian64 = gaussians::DiagGaussian<f64>;
pub type Model64 = model::MultimodalVAE<f64>;
