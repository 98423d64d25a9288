//! Command-line front end: dataset conversion, training, evaluation, plots
//! and hyperparameter sweeps over the `tsrobust` library.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod sweep;
