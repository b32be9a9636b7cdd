//! Simulation and analysis of two-phase path averaging over noisy links.
//!
//! Nodes of a cycle, a two-dimensional grid or a regular random geometric
//! graph hold real values and must agree on their average while every
//! transmitted value is corrupted by additive white Gaussian noise. Each
//! outer iteration establishes node-disjoint routes along rows (or columns)
//! of a square partition, averages along them in both directions, and mixes
//! the noisy route averages into the local estimates with a decaying step.
//!
//! Modules:
//! - [`graph`]: topology construction, square partition, diameter, spread.
//! - [`channel`]: AWGN transmission and seeded random streams.
//! - [`protocol`]: inner phase (direction, heads, routes, averaging) and the
//!   outer stochastic-approximation update.
//! - [`spectral`]: averaged matrix, spectral gap and canonical-path bounds.
//! - [`metrics`]: run traces, MSE decomposition, error envelopes, stopping time.
//! - [`sim`]: Monte-Carlo sample paths, parallel when the `parallel` feature is on.
//! - [`cli`]: experiment files, presets and result writers.

pub mod channel;
pub mod cli;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod protocol;
pub mod sim;
pub mod spectral;

pub use error::{Error, Result};
