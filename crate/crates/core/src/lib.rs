//! Stacked intelligent surface (SIS) MIMO link: geometry, Rayleigh-Sommerfeld
//! and Rician propagation, linear and amplitude-step surface stacks, a
//! reverse-mode gradient engine, and the statistical-CSI trainer.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradients;
pub mod link;
pub mod propagation;
pub mod rng;
pub mod surface;
pub mod training;

pub use num_complex::Complex64;

pub use config::{ExperimentConfig, LossKind, SmoothingMode};
pub use error::{Error, Result};
pub use evaluation::{estimate_ser, qpsk_awgn_oracle, SerEstimate, SweepResult};
pub use geometry::{build_geometry, GeometryConfig, Point3, SystemGeometry};
pub use link::{ChannelMode, LinkModel};
pub use surface::{param_count, ActivationKind, SisParams, Smoothing};
pub use training::{train, Equalizer, LearningCurve, Scenario, SymbolBatch};
