//! Contextual heterogeneous graph network for human-object interaction
//! detection.
//!
//! Humans (subjects) and objects are two node kinds of a fully connected
//! graph. Each reasoning round gathers intra-class messages from nodes of
//! the same kind, weighted by attention over context vectors, and
//! inter-class messages from the other kind, weighted by a learned
//! interactiveness score. A joint classifier then scores every
//! subject-object pair.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod math;
pub mod spatial;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
