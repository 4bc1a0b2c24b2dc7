//! Selective-parameter finetuning laboratory for small transformer language
//! models with visual-prefix inputs.

pub mod analysis;
pub mod autograd;
pub mod budget;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod normmath;
pub mod peft;
pub mod tensor;

pub use error::{Error, Result};
