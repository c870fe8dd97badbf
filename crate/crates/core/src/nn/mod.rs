//! Minimal CPU network engine: NCHW tensors, convolutions with explicit
//! backward passes, masked cross-entropy and first-order optimizers.

mod layers;
mod loss;
mod optim;
mod scalar;
mod tensor;
mod unet;

pub use layers::{
    maxpool2, maxpool2_backward, relu_backward, relu_inplace, upsample2, upsample2_backward, Conv2d,
    ConvCache, ParamLayout,
};
pub use loss::{masked_cross_entropy, softmax, MaskedLoss};
pub use optim::{Method, Optimizer, OptimizerConfig};
pub use scalar::{matmul, Scalar};
pub use tensor::{concat_channels, crop, pad_to_multiple, split_channels, Tensor};
pub use unet::{BlockCache, ConvBlock, UNet, UNetCache, DOWNSAMPLE};
