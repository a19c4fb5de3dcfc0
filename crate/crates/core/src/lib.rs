//! Parallel MRI reconstruction with a SPIRiT-constrained score-based diffusion
//! sampler, plus classic SPIRiT baselines and the simulation and evaluation
//! tooling around them.

pub mod classic;
pub mod cxt;
pub mod diffusion;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod simulation;
pub mod spirit;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ComplexArray, RealImage};
