//! Log-correlated Gaussian fields and complex Gaussian multiplicative chaos
//! on periodic desk-scale grids.

pub mod kernels;
pub mod quad;
pub mod chaos;
pub mod scaling;
pub mod fft;
pub mod rng;
pub mod synth;
pub mod decomp;
pub mod analysis;
pub mod acceptance;
