//! Core library for personalized federated denoising of low-count volumes.
//!
//! The crate provides a small reverse-mode autodiff engine with the 3-D
//! operations needed by a residual U-Net denoiser, count-conditional feature
//! modulation layers, Adam with the training objectives, a federated
//! client/server protocol with a portable wire format, synthetic phantom
//! data generation, and volume quality metrics.

pub mod error;
pub mod federation;
pub mod ftn;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod param_tree;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod unet;
pub mod wire;

pub use error::{Error, Result};
pub use federation::{
    run_federated_training, site_adaptation, MetricRow, RunConfig, RunOutcome, SiteRunResult,
    SiteTask, TrainSettings, TransportKind,
};
pub use ftn::{ftn_excitation, ftn_forward, CountLevel, FtnParams};
pub use param_tree::{ParamTree, TreeEntry, TreeSnapshot};
pub use phantom::{build_site_dataset, Sample, SiteDataset, SiteProfile};
pub use tensor::{no_grad, Dtype, Element, Tensor, TensorId};
pub use unet::{DenoiserModel, StrategyId, UNetConfig};
