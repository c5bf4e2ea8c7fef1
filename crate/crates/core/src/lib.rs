//! Link-level simulator for unified single-tone/multi-tone SWIPT with PAPR
//! modulation, HPA nonlinearity, nonlinear energy harvesting and TCN-based
//! mode switching.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod channel;
pub mod control;
pub mod error;
pub mod harvest;
pub mod hpa;
pub mod neuralnet;
pub mod quadrature;
pub mod receiver;
pub mod runner;
pub mod units;
pub mod waveform;

pub use error::{Error, Result};
