//! Differentiable neural operators registered on the autodiff graph.
//!
//! Every builder validates shapes, runs the forward kernel, and pushes a node
//! whose saved context is enough to replay the backward rule. Kernels are
//! pure functions of their inputs; the heavy ones parallelize their voxel
//! loops internally with fixed reduction orders, so results do not depend on
//! thread scheduling.

mod basic;
mod conv;
mod norm;
mod resize;

pub use basic::{
    add, add_scalar, dense, div, exp, mean, mul, mul_scalar, relu, reparameterize, reshape,
    sigmoid, slice, spatial_dropout, square, sub, sum,
};
pub use conv::{conv3d, ConvSpec};
pub use norm::{group_norm, GroupNormSpec};
pub use resize::trilinear_upsample;
