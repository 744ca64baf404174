//! Skill kernels over geometric features, learned from demonstration traces
//! with maximum-entropy inverse reinforcement learning.

pub mod geometry;
pub mod gradcheck;
pub mod irl;
pub mod kernelnet;
pub mod numeric;
pub mod rng;
pub mod simgen;
mod scalar;

pub use scalar::Scalar;

/// Double-precision instantiations, the default everywhere.
pub type Tensor64 = numeric::Tensor<f64>;
pub type Tape64 = numeric::Tape<f64>;
pub type Feature64 = geometry::GeometricFeature<f64>;
pub type KernelParams64 = kernelnet::KernelParameters<f64>;

/// Single-precision instantiations for inference.
pub type Tensor32 = numeric::Tensor<f32>;
pub type Tape32 = numeric::Tape<f32>;
pub type Feature32 = geometry::GeometricFeature<f32>;
pub type KernelParams32 = kernelnet::KernelParameters<f32>;
