//! Power, sample-size and simulation tools for cluster randomized trials
//! with a four-level nested exchangeable correlation structure.

// `!(x > 0.0)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlation;
pub mod datagen;
pub mod design;
pub mod dist;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod rng;
pub mod structure;

pub use correlation::{BlockDims, CorrelationParams, EigenSpectrum};
pub use design::{DesignSpec, Link, OutcomeModel, RandLevel, VarianceFamily};
pub use error::{Error, Result};
pub use structure::{ClusterShape, NestedCorrelation};
