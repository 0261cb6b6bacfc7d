//! Numerical core of mitoshift: a small reverse-mode tensor tape, Beer–Lambert
//! stain estimation (Macenko and Vahadane), a toy vision transformer with
//! prompt tuning and LoRA adapters, a gradient-reversal domain branch, the
//! training loop, dihedral test-time augmentation and binary classification
//! metrics.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, image decoding
//! and the command line live in the `mitoshift` crate.

#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod backbone;
pub mod domain_adapt;
pub mod error;
pub mod gradcheck;
mod math;
pub mod metrics;
pub mod params;
pub mod stain;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod tta;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
