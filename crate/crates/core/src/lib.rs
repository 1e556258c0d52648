//! Learned actuator dynamics and chance-constrained contouring tube MPC for
//! repetitive path following.
//!
//! The crate is layered bottom-up: [`wblr`] (weighted Bayesian regression),
//! [`experience`] (run/location-indexed data and model building),
//! [`vehicle`] and [`belief`] (dynamics and uncertainty propagation),
//! [`mpc`] (the controller), [`sim`] (plant and scenarios) and
//! [`metrics`]/[`report`]/[`io`] (evaluation and files).

pub mod ablation;
pub mod belief;
pub mod config;
pub mod experience;
pub mod io;
pub mod metrics;
pub mod mpc;
pub mod path;
pub mod qp;
pub mod report;
pub mod sim;
pub mod vehicle;
pub mod wblr;

/// Shipped path and scenario files.
pub const DATA_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
