//! Mapping a classifier's decision boundary near clean images.
//!
//! The crate trains seed-varied ensembles of small MNIST networks, generates
//! adversarial examples with several gradient- and decision-based attack
//! families, spans low-dimensional hyper-rectangles over each adversarial
//! set, and measures how every ensemble member classifies samples drawn from
//! those rectangles. Regions where members disagree are uncertainty regions;
//! regions where all members fail are transferable adversarial regions.

pub mod attacks;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod regions;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
