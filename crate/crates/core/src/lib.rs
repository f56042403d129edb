//! Aerial-ground person re-identification with a view-decoupling encoder,
//! prompt re-calibration and local feature refinement, built on a small
//! reverse-mode autodiff engine.
//!
//! Layout:
//! - [`tensor`], [`kernels`], [`autodiff`], [`optim`]: numeric substrate
//! - [`model`]: encoder, prompt re-calibration, local refinement, heads
//! - [`objectives`]: identity, triplet, view and orthogonality losses
//! - [`data`]: manifests, protocols, sampling, augmentation, synthetic data
//! - [`eval`]: features, distances, CMC/mAP
//! - [`train`], [`checkpoint`]: training loop and model files

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
