//! Two-stage propagation-scale forecasting for affiliate promotion networks.

pub mod autodiff;
pub mod datapipe;
pub mod harness;
pub mod model;
pub mod simkit;
