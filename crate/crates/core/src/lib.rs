//! Prior-guided spatial attention for low-dose CT denoising.
//!
//! The crate bundles everything needed to train and evaluate a RED-CNN style
//! residual encoder-decoder whose spatial attention maps are weighted by
//! per-image anatomical prior distributions:
//!
//! * [`autodiff`]: a small reverse-mode tape over dense tensors.
//! * [`priors`]: descriptor sets, prior distributions and prior files.
//! * [`attention`]: the prior-weighted attention block plus SE and CBAM
//!   baselines and attention-map export.
//! * [`network`]: model assembly and checkpoints.
//! * [`data`]: CT rasters, standardization, patch grids, phantoms, splits.
//! * [`metrics`]: RMSE, PSNR, SSIM and report aggregation.
//! * [`train`] and [`experiment`]: the optimization loop and ablation runs.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fsio;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod priors;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, ErrorClass, Result};
pub use tensor::{Element, Tensor};
