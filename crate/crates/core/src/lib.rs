//! Neural texture synthesis and style transfer with histogram losses.
//!
//! Images are optimized from white noise so that the activations of a
//! feature extractor match an exemplar's Gram matrices and per-feature
//! histograms. The crate is generic over the scalar type; [`Tensor64`] and
//! friends fix it to `f64`, which the command-line tool uses.

pub mod error;
pub mod fixtures;
pub mod gram_lab;
pub mod imageio;
pub mod localized;
pub mod manifest;
pub mod network;
pub mod scalar;
pub mod selfcheck;
pub mod stats;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, ParseError, Result};
pub use localized::IndexedMask;
pub use network::{load_network, random_filter_bank, ActivationSet, NetworkSpec, DESK_TOPOLOGY};
pub use scalar::Scalar;
pub use synthesis::{style_transfer, synthesize_texture, LossReport, SynthesisConfig, TransferMasks};
pub use tensor::{FilterKernels, PoolMode, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Network64 = NetworkSpec<f64>;
pub type Network32 = NetworkSpec<f32>;
pub type Kernels64 = FilterKernels<f64>;
pub type Kernels32 = FilterKernels<f32>;
pub type FeatureDistribution64 = gram_lab::FeatureDistribution<f64>;
