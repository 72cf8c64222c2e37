//! Relay selection, scheduling and power control for wireless-powered
//! communication networks under non-linear energy harvesting, together with
//! convolutional relay-selection classifiers, teacher-student distillation
//! and a parameter-budget architecture search.

pub mod error;
pub mod model;
pub mod par;
pub mod scheduler;
pub mod selection;
pub mod dataset;
pub mod neural;
pub mod distill;

pub use error::{Error, Result};
