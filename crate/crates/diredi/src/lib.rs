//! Lifecycle management for edge-AI object detectors.
//!
//! The crate covers the full loop between a manufacturer and a customer:
//! distilling a small edge detector from a larger tutor detector, reverse
//! distillation of two tutors at the customer side to capture a knowledge
//! gap, packaging that gap as a neck+head weight delta, applying it to the
//! manufacturer's tutor behind a verification gate, and re-distilling an
//! updated edge model.
//!
//! Modules:
//! - [`autograd`]: small reverse-mode autodiff engine over `ndarray` (f64).
//! - [`nn`]: layers and parameter storage built on the autograd engine.
//! - [`detector`]: anchor-free single-stage detector in configurable tiers.
//! - [`fgd`]: focal + global feature-imitation distillation losses.
//! - [`distill`]: the training procedures (forward/reverse distillation,
//!   fine-tuning, direct training).
//! - [`packet`]: weight extraction, delta arithmetic, transferable packets,
//!   and the update verification gate.
//! - [`data`]: synthetic toy datasets, VOC ingestion, category plans.
//! - [`eval`]: AP / mAP / precision / recall / F1 metrics.
//! - [`pipeline`]: declarative experiment orchestration and reporting.

pub mod autograd;
pub mod container;
pub mod data;
pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fgd;
pub mod nn;
pub mod packet;
pub mod pipeline;

pub use error::{Error, Result};
