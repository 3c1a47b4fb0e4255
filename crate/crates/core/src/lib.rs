//! Probabilistic long-horizon wildfire-risk forecasting.
//!
//! Sparse satellite fire detections are turned into dense Fire Risk Maps
//! ([`frm`]), and a conditional diffusion model generates a whole sequence
//! of future maps by running its reverse process as a tree ([`treeplan`],
//! [`sample`]): early, high-noise segments are shared across horizons and
//! the trajectory branches at segment boundaries. Branch transitions are
//! told the relative horizon offset through a shift embedding ([`model`]),
//! and training uses the four-term dual-path shifting loss ([`train`]).

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod frm;
pub mod grid;
pub mod ingest;
pub mod model;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod storage;
pub mod train;
pub mod treeplan;

pub use error::{Error, ErrorKind, Result};
pub use grid::Grid;
