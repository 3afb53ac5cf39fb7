#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autodiff;
pub mod conv;
pub mod data;
pub mod error;
pub mod gmm;
pub mod groups;
pub mod measure;
pub mod metrics;
pub mod mpe;
pub mod nn;
pub mod oracle;
pub mod samplers;
pub mod schedule;
pub mod score;
pub mod tensor;

pub use autodiff::{check_gradient, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
