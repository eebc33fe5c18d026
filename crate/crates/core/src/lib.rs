//! Small CNN engine, adversarial attacks and adversarial training, with
//! Fourier-domain and representation-similarity analyses.

pub mod attacks;
pub mod cka;
pub mod data;
pub mod error;
pub mod export;
pub mod fourier;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod par;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Tape, Var};
pub use tensor::Tensor;
