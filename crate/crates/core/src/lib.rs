pub mod color;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod objective;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{BinaryMask, Image, ProbMap, Rng};
