//! Conversion of small vision transformers into multi-threshold spiking
//! networks, with a time-stepped simulator and operation accounting.

pub mod archive;
pub mod calibrate;
pub mod convert;
pub mod ec;
pub mod energy;
pub mod error;
pub mod model;
pub mod neuron;
pub mod report;
pub mod runtime;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
