//! Post-fusion registration for infrared/visible image fusion.
//!
//! Given a visible image, an infrared image and their (possibly misaligned)
//! fused result, the pipeline localizes misregistered regions, corrects them
//! with bi-directional deformation warping, and restores modality detail with
//! a gated-MLP refinement block. Everything needed to train and verify the
//! network on synthetic data lives here: a small reverse-mode autodiff tape,
//! the geometric kernels, the losses, the Adam training loop, checkpoints and
//! the evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod reference;
pub mod register;
pub mod selftest;
pub mod simulate;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod warpcore;

pub use config::{LossWeights, ModelConfig, MrbVariant, RunConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use network::{Model, Params, ScaleOutput};
pub use tensor::{ImagePlane, Shape, Tensor};
