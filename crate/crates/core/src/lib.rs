//! Simulation and analysis of the nonlinear dynamics of two mechanical modes
//! coupled to two optical modes of a membrane-in-the-middle cavity.

pub mod bessel;
pub mod cavity_response;
pub mod cli;
pub mod detection;
pub mod error;
pub mod io;
pub mod langevin;
pub mod model;
pub mod slowflow;
pub mod spectral;

pub use error::{ConfigError, Error, Result};
pub use model::SystemParams;
