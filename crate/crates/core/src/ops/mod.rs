//! Forward and backward kernels for the autoencoder's layers.

mod activation;
mod conv;
mod dense;
mod loss;

pub use activation::{leaky_relu, leaky_relu_backward};
pub use conv::{conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward, ConvGrads, ConvSpec};
pub use dense::{dense_backward, dense_forward, DenseGrads};
pub use loss::{l1_loss, l1_loss_with_grad};
