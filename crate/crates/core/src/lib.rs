//! Reconstruction of street-level air-quality fields from sparse mobile
//! measurements by graph-based matrix completion.
//!
//! The pipeline runs in stages that communicate through plain data types:
//!
//! * [`ingest`] turns raw readings into an incomplete location × timeslot matrix.
//! * [`graph`] builds the weighted location graph and its normalized propagation operator.
//! * [`avgae`] is the variational graph autoencoder that completes the matrix.
//! * [`baselines`] holds kriging and matrix-factorization reference methods.
//! * [`eval`] runs the repeated holdout protocol and produces reports.
//! * [`synth`] generates street networks, pollution fields and vehicle traces.
//!
//! [`numcore`] provides the dense/sparse algebra and the reverse-mode tape the
//! model is trained with.

pub mod avgae;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod geo;
pub mod graph;
pub mod ingest;
pub mod numcore;
pub mod synth;

pub use error::{Error, Result};
