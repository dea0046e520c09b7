//! Metal artifact reduction for fan-beam CT.
//!
//! The crate is `no_std` (with `alloc`) and carries the whole numerical
//! pipeline: a dense tensor type with a tape-based reverse-mode autodiff
//! engine, a real 2-D FFT, the fan-beam projector / adjoint / FBP triple,
//! polychromatic metal-corruption simulation, the classical LI / NMAR /
//! FSNMAR baselines, the sinogram, image and Fourier-domain restoration
//! networks, their losses and metrics, a trainer and the dilated-mask
//! robustness protocol. File formats, configuration and the command-line
//! front end live in the `marnet` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod fft;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod mar;
pub mod metrics;
pub mod nn;
pub mod physics;
pub mod real;
pub mod rng;
pub mod robustness;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
