//! Minimal CNN substrate: CHW tensors, 2-D convolution with hand-written
//! backprop, a U-shaped encoder-decoder, Adam/AdamW, and a binary
//! checkpoint format. Training parallelizes over the batch; each sample's
//! forward/backward runs independently and gradients are summed in a fixed
//! order, so results are deterministic for a fixed seed.

pub mod ckpt;
pub mod conv;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod unet;

pub use ckpt::{load_checkpoint, save_checkpoint};
pub use conv::Conv2d;
pub use optim::{Adam, LrSchedule};
pub use tensor::{GradSet, ParamSet, Tensor};
pub use unet::{UNet, UNetConfig};
