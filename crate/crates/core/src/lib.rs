//! Detection across datasets with conflicting taxonomies.
//!
//! Categories from every dataset live in one language-embedding space. A
//! category extractor picks the categories present in an image, each picked
//! category seeds a group of queries, and every query predicts a single
//! matchability score for its own category plus a refined box. Training
//! matches ground truths to queries only within their class group, so two
//! datasets naming the same concept differently never compete for a query.

pub mod cem;
pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod head;
pub mod labelspace;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
