//! And-Or tree contour shape models.
//!
//! Edge maps are sets of polylines. A model splits a detection window into a
//! 2x3 grid of blocks; each block is an or-node that picks one of up to `m`
//! leaf classifiers, places its block near an anchor, and matches one
//! fragment. A root classifier then verifies the assembled shape.
//!
//! Training alternates latent inference, constrained re-clustering of the
//! leaves, and a structural SVM solve ([`learning::train`]). Detection scans
//! windows over several scales ([`inference::detect`]).

pub mod dataset;
pub mod descriptor;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod learning;
pub mod model;
pub mod sparse;
pub mod ssvm;
pub mod synth;

pub use error::{Error, Result};
