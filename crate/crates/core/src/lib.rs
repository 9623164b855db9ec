//! Risk-neutral density recovery from put bid-ask quotes.
//!
//! The put-price curve on `[0, B]` is expanded in the closed-form singular
//! basis of the restricted put operator, and the smoothest expansion that
//! respects no-arbitrage and bid-ask constraints is found by a small dense
//! quadratic program. The smallest spectral cutoff that admits a feasible
//! point is selected.

pub mod spectral;
pub mod operators;
pub mod market;
pub mod constraints;
pub mod qp;
pub mod estimate;
