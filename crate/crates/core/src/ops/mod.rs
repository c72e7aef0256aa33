//! Differentiable primitives: valid 3-D convolution, parametric ReLU,
//! inverted dropout, and voxel-wise softmax with cross-entropy.
//!
//! Each op exposes a forward function and a backward function returning
//! gradients w.r.t. every input and parameter. The backward passes are
//! hand-derived; `gradcheck` verifies them against finite differences at the
//! whole-network level, and the tests here pin the same adjoint identities
//! locally.

pub mod conv;
pub mod dropout;
pub mod prelu;
pub mod softmax;

pub use conv::{conv3d_valid, conv3d_valid_backward, ConvGradients, ConvKernelBank, ConvStrategy};
pub use dropout::{dropout_backward, dropout_forward, DropoutMask};
pub use prelu::{prelu_backward, prelu_forward};
pub use softmax::{cross_entropy, voxel_softmax};
