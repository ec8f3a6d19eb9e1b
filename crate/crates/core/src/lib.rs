//! Building blocks for studying unsupervised anomaly detection with 3D
//! convolutional autoencoders when the "healthy" training set is
//! contaminated, and for pruning outliers during training with an adaptive
//! reconstruction-loss threshold.
//!
//! * [`tensor`], [`ops`], [`optim`]: a small dense numeric core with
//!   hand-written adjoints for exactly the layers the autoencoder uses.
//! * [`phantom`]: synthetic brain-like volumes, lesion injection and
//!   dataset assembly at configurable impurity.
//! * [`model`]: the autoencoder, its initialization and checkpoints.
//! * [`trainer`]: baseline training and training with outlier removal.
//! * [`eval`]: AUROC, removed-sample fractions and error maps.

pub mod eval;
pub mod model;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use tensor::{ParamBlock, Real, Tensor, TensorError};
