//! State-of-health estimation for lithium-ion cells from in-operation signals.
//!
//! The crate turns raw charge/discharge cycles into five health indicators,
//! preprocesses them into incremental features and maps those to capacity with
//! a linear regression or an ARMAX model. A synthetic campaign simulator with
//! ground truth is included for testing.

// Comparisons are written as `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod error;
pub mod estimation;
pub mod indicators;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod preprocessing;
pub mod segmentation;
pub mod simulator;

pub use config::ToolkitConfig;
pub use error::{Error, Result};
pub use indicators::{CrossingRule, VoltageWindow, WindowDirection};
pub use model::{
    CapacitySeries, CycleMeta, CycleRecord, OcvCurve, OcvDirection, Phase, PhaseBoundaries,
    RptRecord, SampleSeries,
};
pub use pipeline::{CycleIndicators, Indicator};
pub use preprocessing::{Feature, FeatureMatrix};
