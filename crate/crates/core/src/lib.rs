//! Hand pose and shape recovery from a single binary silhouette.
//!
//! A parametric skinned hand is posed, rendered through a soft silhouette
//! rasterizer and fitted to a target mask by gradient descent on a
//! composite loss (silhouette cross-entropy, contour Chamfer term and,
//! when ground truth is available, joint and vertex supervision).
//!
//! Pipeline modules:
//!
//! - [`hand_model`] / [`stylized`]: posing, skinning and joint regression.
//! - [`camera`] / [`render`]: pinhole projection and soft/hard rasterization.
//! - [`image_ops`]: contour extraction, distance transform, soft contour.
//! - [`alignment`]: Procrustes alignment with its adjoint.
//! - [`losses`] / [`diff_engine`]: objective terms and exact gradients.
//! - [`optim`] / [`fitting`]: Adam and the two-stage multi-restart fit.
//! - [`metrics`] / [`synth`]: evaluation and synthetic data generation.

pub mod alignment;
pub mod camera;
pub mod diff_engine;
pub mod dual;
pub mod error;
pub mod fitting;
pub mod hand_model;
pub mod image_ops;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod render;
pub mod silhouette;
pub mod stylized;
pub mod synth;

pub use error::{Error, Result};
