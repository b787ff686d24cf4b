//! Calibration and simulation toolkit for quadratic Hawkes models of
//! order-book event flow.
//!
//! The crate estimates the feedback structure of a six-type order-book
//! event stream (cancellations, limit orders and market orders on each
//! side) whose intensity reacts both linearly and quadratically to past
//! price moves:
//!
//! ```text
//! lambda_t = alpha0 + int phi(t-s) dN_s + int L(t-s) dP_s
//!          + int int K(t-s, t-u) dP_s dP_u
//! ```
//!
//! The pipeline goes: ingest raw event rows, build the surprise-price
//! increments, estimate binned moment curves, then solve the resulting
//! integral equations for the kernels `phi`, `L`, `K` and the base rate
//! `alpha0`. An effective (Hawkes-aggregated) route, a rank-one
//! factorisation of the quadratic kernel, liquidity diagnostics and an
//! exact-intensity event simulator round out the toolkit.

pub mod calibrate;
pub mod effective;
pub mod error;
pub mod fits;
pub mod grids;
pub mod ingest;
pub mod io;
pub mod kernels;
pub mod liquidity;
pub mod moments;
pub mod simulate;

pub use error::{Error, Result};
