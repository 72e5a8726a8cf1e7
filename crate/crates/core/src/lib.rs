//! Connectome classification with graph neural networks.
//!
//! The pipeline runs from ROI time series to thresholded functional
//! connectivity graphs ([`graphbuild`]), through site-stratified cohort
//! splits and a synthetic ground-truth cohort generator ([`dataset`]),
//! GCN/GAT models ([`models`]) trained with Adam and combined by soft voting
//! ([`trainer`]), to gradient saliency and edge-mask explanations
//! ([`explain`]).

pub mod dataset;
pub mod error;
pub mod explain;
pub mod graphbuild;
pub mod io;
pub mod models;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
