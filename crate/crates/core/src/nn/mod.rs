//! A small CPU neural-network engine with explicit forward/backward passes.
//!
//! Activations are stored channel-major (`[c][n][h][w]`), so a convolution is
//! a single GEMM against an im2col matrix and batch normalization reduces
//! over contiguous rows. Fully connected layers reuse the same layout with
//! `h = w = 1`. Every kernel is single-threaded with a fixed summation
//! order, which makes training bit-reproducible for a given seed.

mod act;
mod conv;
mod init;
mod linear;
mod norm;
mod param;
mod scalar;
mod tensor;

pub use act::{global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, MaxPool2d, MaxPoolCache};
pub use conv::{Conv2d, ConvCache};
pub use init::ParamInit;
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm, BnCache, NormMode};
pub use param::{Module, Param, ParamRole, ParamSet, ParamTensor};
pub use scalar::{gemm, Scalar};
pub use tensor::FeatureMap;
