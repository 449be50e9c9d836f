//! Pixel-adaptive kernel attention: attention-modulated convolution, a
//! hierarchical multi-dilation module built from it, a guided joint
//! upsampler, and the training and inspection tooling around them.

pub mod cli;
pub mod error;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod hpm;
pub mod io;
pub mod joint;
pub(crate) mod kernels;
pub mod nn;
pub mod ops;
pub mod paka;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::ConvSpec;
pub use graph::{Activation, Gradients, Graph, Mode, Var};
pub use hpm::{hpm_param_count, HpmConfig, HpmState};
pub use joint::{DsrConfig, DsrNet, JointUpLayer};
pub use kernels::interp::UpsampleKind;
pub use nn::{Module, Param, ParamKind};
pub use paka::{kernel_attention, PakaConfig, PakaLayer};
pub use rng::Rng;
pub use tensor::Tensor;
