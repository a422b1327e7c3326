#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod substrate;
pub mod training;

pub use error::{Error, Result};
