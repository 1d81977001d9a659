#![no_std]
extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod corpus;
pub mod decode;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod ssl;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
