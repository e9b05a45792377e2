//! Core library for the generalized transferable attack workbench:
//! datasets, models, attack primitives, the universal surrogate, the
//! sine-wave attack, ensemble baselines, and evaluation.

pub mod attack_core;
pub mod baselines;
pub mod binio;
pub mod checkpoint;
pub mod data;
pub mod ice;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod sine_attack;

pub use error::{GtaError, Result};
