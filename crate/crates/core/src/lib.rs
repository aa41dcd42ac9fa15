//! Safe reinforcement learning for hydraulic force control: an analytic
//! actuator simulator, a learned dynamics surrogate, a feedback-linearizing
//! PI controller, a learned contraction-metric filter and a SAC gain tuner.

// `!(x > 0.0)` is used on purpose throughout validation so NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod nn;
pub mod plant;
pub mod controller;
pub mod reference;
pub mod dynamics;
pub mod error;
pub mod surrogate;
pub mod certificate;
pub mod agent;
pub mod config;
pub mod harness;
pub mod plot;

pub use error::{Error, Result};
