//! Reference implementations used as test oracles, kept independent of the
//! code paths they check, plus random instance generators.

pub mod curves;
pub mod gaussian;
pub mod instances;
pub mod minimize;
pub mod objective;
pub mod scenarios;
pub mod spline;
pub mod stats;
