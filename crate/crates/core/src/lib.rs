//! Episodic benchmark lab for style prompt tuning with step-wise
//! distribution alignment on a frozen backbone.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense f64 tensors plus a tape-based
//!   reverse-mode differentiation engine sized for small MLP pipelines.
//! * [`optim`]: momentum SGD.
//! * [`data`]: synthetic episodic task generation with controllable domain
//!   shift, and a small binary dataset format.
//! * [`model`]: the style prompt, the frozen MLP backbone, the linear
//!   classifier, and checkpoint round-tripping.
//! * [`align`]: credible-group selection and chain search over successive
//!   prediction snapshots.
//! * [`loss`]: mutual-information and balance losses on paired predictions,
//!   and the supervised cross-entropy.
//! * [`train`]: the dual-phase per-episode loop, ablation switches and label
//!   propagation.
//! * [`theory`]: error bounds, the step-factor contraction diagnostic and
//!   Wasserstein-∞ distances.
//! * [`config`], [`report`], [`harness`]: run configuration, reporting and
//!   the multi-episode driver.

pub mod align;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
