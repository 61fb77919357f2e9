//! Retrieval-augmented sequence labeling.
//!
//! A small recurrent tagger produces token representations; a datastore of
//! training-token representations supports exact nearest-neighbor retrieval,
//! whose evidence is either interpolated with the tagger's distribution
//! ([`knnsl`]) or aggregated by heterogeneous graph attention ([`gnn`]).

mod binio;
pub mod checkpoint;
pub mod corpus;
pub mod datastore;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod harness;
pub mod knnsl;
pub mod prob;

pub use error::{Error, Result};
