//! Spectral toolkit for invariant tori of real-analytic diffeomorphisms on
//! `T^n x R^m`: truncated Fourier/Taylor arithmetic, small-divisor difference
//! equation solvers, a quadratically convergent conjugacy solver computing
//! the normal form `Q = T_lambda . G . P . G^{-1}`, and finite-dimensional
//! parameter elimination producing twisted-translated and translated
//! invariant tori (the translated curve of the annulus being the 1+1
//! dimensional case).

pub mod cohomology;
pub mod conjugacy;
pub mod diophantine;
pub mod elimination;
pub mod error;
mod fft;
pub mod fourier;
pub mod harness;
pub mod jet;
pub mod map;
pub mod newton;

pub use error::{Error, Result};
pub use fourier::{FourierSeries, GridData, ValueShape};
pub use jet::{Jet, MultiIndexTable};
pub use map::{CompositionOptions, FourierTaylorMap};
