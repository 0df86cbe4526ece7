//! Training-free 3D tomographic reconstruction.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]), a
//! volumetric U-Net built on it ([`unet`]), a matched parallel-beam
//! projector/backprojector pair with FBP ([`tomo`]), classical TV-regularized
//! reconstruction ([`classical`]), the deep-image-prior optimizers
//! ([`engine`]) and phantoms, metrics and file formats ([`toolkit`]).

pub mod autodiff;
pub mod classical;
pub mod engine;
mod error;
mod real;
pub mod tomo;
pub mod toolkit;
pub mod unet;
mod volume;

pub use error::{Error, Result};
pub use real::Real;
pub use volume::{Sinogram, Volume};
