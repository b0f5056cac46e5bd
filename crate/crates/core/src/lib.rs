//! Phase retrieval and system identification from phaseless dynamical
//! samples `|<x, A^l phi>|^2`.
//!
//! The measurements of a diagonalizable system form an exponential sum whose
//! bases are the pairwise eigenvalue products `lambda_j * conj(lambda_k)`.
//! The approximate Prony method ([`prony`]) recovers those bases and their
//! coefficients; the pipelines in [`recovery`] turn them back into the
//! signal, the spectrum, or both. [`sensitivity`] holds closed-form error
//! bounds together with Monte Carlo checkers, and [`experiments`] drives the
//! numerical studies exposed by the `dynphase` binary.

pub mod algebra;
pub mod dynamics;
mod error;
pub mod experiments;
pub mod matching;
pub mod polish;
pub mod prony;
pub mod recovery;
pub mod sensitivity;

pub use error::{Error, Result};
pub use num_complex::Complex64;
