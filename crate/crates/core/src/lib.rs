//! MatIR: a hybrid Mamba/Transformer image restoration network built on a
//! small float64 reverse-mode autodiff engine.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod irss;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod resample;
pub mod ssm;
pub mod tensor;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{MatIrConfig, MatIrModel, Task};
pub use tensor::Tensor;
