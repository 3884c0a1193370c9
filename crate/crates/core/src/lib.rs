//! Dual pricing and hedging of Bermudan options.
//!
//! The library builds an approximating Doob-Meyer martingale for the Snell
//! envelope by backward least-squares regression on increments of tradable
//! instruments, evaluated on a subtick rebalancing grid. From that martingale
//! it produces upper-bound (dual) price estimates, the discrete hedging
//! strategy itself, and P&L distributions of the hedge, alongside a
//! Longstaff-Schwartz primal benchmark, a scalar one-parameter dual baseline,
//! and an exact binomial-lattice oracle for small instances.

pub mod analytics;
pub mod artifact;
pub mod basis;
pub mod config;
pub mod dual;
pub mod error;
pub mod instruments;
pub mod lattice;
pub mod model;
pub mod parallel;
pub mod payoff;
pub mod pnl;
pub mod primal;
pub mod rogers;
pub mod rng;
pub mod run;

pub use error::{Error, Result};
