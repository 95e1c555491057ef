//! Estimators for the mean of a binary outcome under non-ignorable
//! missingness, treating the missing cases as a label-shifted population.

pub mod data;
pub mod error;
pub mod math;
pub mod models;
pub mod calibrate;
pub mod estimators;
pub mod coherence;
pub mod datagen;
pub mod harness;

pub use error::{Error, Result};
