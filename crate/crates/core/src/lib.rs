//! Domain-adaptive object detection with a mean-teacher detector pair and a
//! per-class bank of adversarial domain classifiers.

pub mod boxes;
pub mod checkpoint;
pub mod dcbank;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod meanteacher;
pub mod nn;
pub mod optim;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
