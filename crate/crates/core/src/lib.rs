//! Decoy-state BB84 finite-key engine and post-processing pipeline.
//!
//! Modules, bottom-up:
//! - [`finitekey`]: binary entropy, 1-decoy bounds, secret-key length.
//! - [`channel`]: source/fibre/detector statistics and tally sampling.
//! - [`optimizer`]: protocol-parameter search and rate-distance curves.
//! - [`session`]: two-party pulse generation, detection, sifting, wire protocol.
//! - [`cascade`]: interactive error reconciliation.
//! - [`pa`]: privacy amplification over Mersenne-prime fields.
//! - [`polar`]: polarization drift and SPGD feedback simulator.
//! - [`preset`]: named experiment configurations.

pub mod channel;
pub mod finitekey;
pub mod optimizer;
pub mod cascade;
pub mod session;
pub mod pa;
pub mod polar;
pub mod preset;
