//! Spectral inference for discrete hidden semi-Markov models.

pub mod bench;
pub mod em;
pub mod hsmm;
pub mod io;
pub mod moments;
pub mod rank;
pub mod spectral;
pub mod tensor;
