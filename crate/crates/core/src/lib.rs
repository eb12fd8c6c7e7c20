//! Portfolio agent that feeds learned return views and a learned risk
//! aversion into the Black-Litterman model, trained by deterministic policy
//! gradient against a foresight target, and evaluated in a self-financing
//! long/short simulator.
//!
//! Module map:
//!
//! - [`marketdata`]: price ingestion, daily log2 returns, period grid, states
//! - [`exchange`]: integer-share execution, costs, cash and value accounting
//! - [`blmodel`]: covariance, equilibrium prior, view blending, closed form
//! - [`env`]: a price panel cut into trading periods, ready for simulation
//! - [`policy`]: Transformer views + CNN risk aversion + BL weights
//! - [`trainer`]: reward, evaluation, target value, policy-gradient loop
//! - [`backtest`]: metric suite, baseline strategies, out-of-sample runs

// `!(x > 0.0)` is how NaN gets rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod blmodel;
mod convert;
pub mod env;
pub mod exchange;
pub mod marketdata;
pub mod policy;
pub mod synthetic;
pub mod trainer;

pub use gradnet;
pub use nalgebra;
