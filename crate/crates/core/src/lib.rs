//! Multi-modal entity alignment between knowledge graphs.

pub mod autograd;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod features;
pub mod kg;
pub mod losses;
pub mod optim;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
