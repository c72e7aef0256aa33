//! Volumetric segmentation engine built around densely connected
//! multi-stream 3-D convolutional networks.
//!
//! The crate is organised in layers:
//!
//! * [`tensor`] and [`ops`] hold the numeric primitives: five-axis volume
//!   tensors, valid 3-D convolution with hand-written forward and backward
//!   passes, per-channel parametric ReLU, inverted dropout and voxel-wise
//!   softmax / cross-entropy.
//! * [`graph`] assembles those primitives into a network. A
//!   [`graph::ArchitectureSpec`] describes kernel widths and the fusion mode
//!   (how many image streams exist and how their feature blocks are
//!   cross-wired); [`graph::plan_wiring`] expands it into an explicit list of
//!   nodes with named input blocks, used both to build a runnable
//!   [`graph::NetworkGraph`] and to count parameters without allocating one.
//! * [`train`] implements patch sampling, He initialisation, RMSprop with
//!   momentum, the stepped learning-rate schedule and the epoch/subepoch
//!   training loop.
//! * [`infer`] runs whole volumes through a trained network by mirror-padding
//!   and tiling, so arbitrary shapes produce seamless dense predictions.
//! * [`metrics`] and [`analysis`] provide segmentation quality measures
//!   (overlap, volume distance, boundary distances) and a connection-weight
//!   reuse matrix for inspecting what a trained network actually wired up.
//! * [`io`] defines the on-disk formats: raw volumes with JSON sidecars,
//!   dataset manifests, checkpoints and a synthetic dataset generator.
//!
//! Everything is deterministic given a seed: all randomness flows through
//! ChaCha8 streams derived from user-supplied seeds, and the reduction order
//! of every parallel section is fixed, so results do not depend on the
//! worker-thread count.

pub mod analysis;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod io;
pub mod label;
pub mod metrics;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape5, VolumeTensor};
