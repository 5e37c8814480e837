//! Core library for a fully synthetic poverty-mapping study.
//!
//! The pipeline this crate supports: generate a seeded synthetic country
//! ([`synthworld`]), turn household incomes into municipality-level bucket
//! benchmarks ([`survey`]), pair imagery tiles with those benchmarks
//! ([`tiler`]), train a small CNN on the tiles ([`convnet`]), and aggregate
//! tile predictions back to municipalities for the stratified R-squared
//! evaluation ([`aggregate_eval`]). Everything is deterministic in the
//! configured seeds, down to the bit.

pub mod aggregate_eval;
pub mod archive;
pub mod convnet;
pub mod rng;
pub mod survey;
pub mod synthworld;
pub mod tiler;
