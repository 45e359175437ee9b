//! Dense numeric kernels shared by every stage of the pipeline.

pub mod activation;
pub mod conv;
pub mod mlp;
pub mod sample;

pub use activation::{l2_normalize, relu, scaled_sigmoid_2, sigmoid, softmax_axis, softplus};
pub use conv::{conv1d, conv2d, conv3d};
pub use mlp::{mlp_forward, Linear, Mlp, MlpSpec, OutputActivation};
pub use sample::{avg_pool_x2, bilinear_sample, bilinear_upsample_x2, sample_into, trilinear_upsample_x2};
