//! Ultrasonic FMCW face scanning, echo-profile extraction, and two-stage
//! classifier-based user authentication, verified against a synthetic
//! multipath channel simulator.

pub mod corpus;
pub mod echo;
pub mod eval;
pub mod instances;
pub mod model;
pub mod error;
pub mod signal;
pub mod simchan;
pub mod store;

pub use error::{Error, Result};
