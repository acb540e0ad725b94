//! Population-based evolutionary gaming (PEG) for unsupervised embedding
//! learning at desk scale.
//!
//! A population of small feed-forward embedders is repeatedly
//!
//! 1. narrowed down by a cooperative selection game whose utility is the
//!    cross-reference scatter (CRS) of the selected ensemble,
//! 2. cloned with uniformly perturbed hyper-parameters, and
//! 3. trained by population mutual learning on DBSCAN pseudo-labels with
//!    EMA teachers.
//!
//! The crate is organised by subsystem:
//!
//! - [`dataset`]: synthetic identity-clustered features, file I/O, splits
//! - [`embedder`]: the population member (MLP + classifier head, Adam, EMA)
//! - [`clustering`]: k-means, k-reciprocal Jaccard distance, DBSCAN
//! - [`objectives`]: PK sampling, hard mining and all training losses
//! - [`metrics`]: ICS/CRS, DBI, silhouette, rank correlations, mAP/CMC
//! - [`game`]: joint actions, cached utilities, best-response dynamics
//! - [`evolution`]: selection, reproduction/mutation, mutual learning, runs
//! - [`harness`]: experiment presets, configuration and report emission

pub mod clustering;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod evolution;
pub mod game;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod seed;
pub mod train;

pub use error::{PegError, Result};
