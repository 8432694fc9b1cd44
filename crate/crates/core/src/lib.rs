//! Block-circulant convolutional layers.
//!
//! The kernel of a circulant convolution layer is partitioned along its
//! input/output channel pair into `N x N` circulant blocks, each stored by a
//! single length-`N` row. That cuts parameters by `N` and lets the layer run
//! its channel mixing as length-`N` FFT products instead of dense
//! matrix-vector products.
//!
//! Module map:
//! - [`tensor`]: dense feature maps, kernels and small matrices.
//! - [`circulant`]: base tensors, dense expansion and nearest-circulant projection.
//! - [`spectral`]: arbitrary-length DFTs with FLOP instrumentation.
//! - [`convops`]: naive, block-wise and FFT convolution, forward and backward.
//! - [`analysis`]: parameter/FLOP accounting and compression-scheme reports.
//! - [`nn`]: a small layer stack, SGD, and the synthetic training task.
//! - [`model_io`]: model, tensor and scheme files.
//! - [`verify`]: self-check property suites.

pub mod analysis;
pub mod circulant;
pub mod convops;
pub mod error;
pub mod model_io;
pub mod nn;
pub mod spectral;
pub mod tensor;
pub mod verify;

pub use circulant::{CirculantBaseTensor, CompressionScheme, PartitionConfig};
pub use convops::ConvGeometry;
pub use error::{Error, Result};
pub use tensor::{Fiber, Matrix, Tensor3, Tensor4};
