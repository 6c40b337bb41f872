//! Part detection by voting of visual concepts.
//!
//! Dense feature vectors on a coarse lattice are clustered into visual
//! concepts. Each concept learns where a semantic part sits relative to it
//! and how its distance to the concept center separates part from
//! background. At test time the most reliable concepts cast log-likelihood
//! votes for part locations, and the vote map is thresholded and suppressed
//! into detections.

pub mod concepts;
pub mod error;
pub mod eval;
pub mod features;
pub mod lattice;
pub mod likelihood;
pub mod pipeline;
pub mod seed;
pub mod spatial;
pub mod voting;
pub mod sphere;

pub use error::{Error, Result};
