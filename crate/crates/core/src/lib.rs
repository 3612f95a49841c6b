//! Filter-free broadband beamforming: Slepian subspace models fitted to
//! multi-sensor array snapshots by least squares, with adaptive, streaming and
//! encoded variants.

pub mod scalar;
pub mod error;
pub mod slepian;
pub mod array;
pub mod forward;
pub mod batch;
pub mod scenario;
pub mod config;
pub mod diagnostics;
pub mod adaptive;
pub mod encodings;
pub mod streaming;
pub mod experiment;

pub use error::{Error, Result};
pub use scalar::{Real, C};

pub type SlepianBasisF32 = slepian::SlepianBasis<f32>;
pub type SlepianBasisF64 = slepian::SlepianBasis<f64>;
