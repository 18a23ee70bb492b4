//! Desk-scale simulator for collaborative model training across clusters
//! connected by slow links.
//!
//! The crate bundles the pieces needed to reproduce the cross-cluster
//! training recipes end to end on one machine: low-rank and low-precision
//! compression codecs with a bit-exact wire format, a deterministic WAN link
//! simulator with an authenticated session layer, a small differentiable
//! training stack, the two cross-cluster protocols built on top of it, and a
//! benchmark runner that writes CSV reports.
//!
//! Core linear algebra is generic over the scalar type ([`scalar::Scalar`]);
//! the rest of the crate works in `f64` through the [`Matrix`] alias.

pub mod bench;
pub mod codec;
pub mod matrix;
pub mod netsim;
pub mod orchestrator;
pub mod scalar;
pub mod toygrad;

pub use matrix::{MatrixError, SvdFactors, TruncatedFactors};

/// Dense `f64` matrix used throughout the crate.
pub type Matrix = matrix::Mat<f64>;

/// Version string recorded in benchmark reports.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
