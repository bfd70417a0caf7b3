//! Minimal differentiable-tensor substrate for the fixed-topology networks
//! used by the noise and aperture stages. Layers cache what they need during
//! `forward` and accumulate parameter gradients during `backward`; there is
//! no general tape.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod unet;

pub use checkpoint::{load_into, read_checkpoint, write_checkpoint};
pub use gradcheck::{gradient_check, gradient_check_with_floor, GradCheckReport};
pub use layers::{ActivationLayer, Conv2d, ConvBlock, Module};
pub use ops::{Activation, ResampleMode};
pub use optim::{adam_step, AdamConfig, Parameter};
pub use tensor::Tensor;
pub use unet::{NoGate, SkipGate, UNet, UNetConfig};
