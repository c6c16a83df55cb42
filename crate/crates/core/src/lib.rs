//! Desk-scale laboratory for distributed K-FAC.
//!
//! The crate bundles a small fully-connected training core ([`model`]), the
//! K-FAC preconditioner with inverse and eigen damping ([`kfac`]), a
//! deterministic multi-worker simulator running S-SGD, MPD-KFAC and DP-KFAC
//! ([`distsim`]), an element-count cost model ([`costmodel`]) and the
//! experiment runner behind the `dkfac` binary ([`runner`]).

pub mod checkpoint;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod distsim;
pub mod error;
pub mod io;
pub mod kfac;
pub mod model;
pub mod numerics;
pub mod runner;
pub mod verify;

pub use error::{Error, Result};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
