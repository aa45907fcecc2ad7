//! Boundary-guided anomaly detection on pre-extracted feature maps.
//!
//! A conditional normalizing flow per feature level learns the density of
//! normal features. After a maximum-likelihood warm phase, an explicit
//! boundary is read off the normal log-likelihood distribution and a
//! semi-push-pull hinge objective empties the margin between the normal and
//! abnormal boundaries, using whatever anomalies (real or synthesized by
//! [`racp`]) are available.
//!
//! Module map:
//!
//! - [`flow`]: coupling blocks, position conditioning, exact log-likelihood
//! - [`gradients`]: analytic backpropagation through the flow
//! - [`objective`]: losses, boundary extraction, focal weights, bound report
//! - [`trainer`]: two-phase training loop, Adam, schedule, checkpoints
//! - [`scoring`]: per-position log-likelihoods to anomaly maps
//! - [`metrics`]: AUROC, PRO, map assembly
//! - [`racp`]: cut-and-paste anomaly synthesis with random augmentation
//! - [`data`]: FBT tensors, manifests, synthetic datasets

pub mod data;
pub mod error;
pub mod flow;
pub mod gradients;
pub mod metrics;
pub mod objective;
pub mod racp;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
pub use flow::{CouplingBlock, FlowModel};
pub use objective::{BoundaryState, FocalConfig, Label, ObjectiveConfig, Phase};
pub use trainer::{Checkpoint, TrainConfig};
