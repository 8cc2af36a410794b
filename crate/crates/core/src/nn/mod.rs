//! Neural-network building blocks on top of the tape.

mod activation;
pub(crate) mod conv;
mod init;
mod linear;
mod norm;
mod resize;

pub use activation::gelu_scalar;
pub use conv::{Conv2d, ConvTranspose2d};
pub use init::Init;
pub use linear::Linear;
pub use norm::{LayerNorm, LAYER_NORM_EPS};
pub use resize::bilinear_resize;
