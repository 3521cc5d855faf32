//! Numerical substrate for the TCVAE forecaster: dense tensors, a recorded
//! computation graph with reverse-mode differentiation, a finite-difference
//! gradient checker, seeded Gaussian sampling and the Adam optimiser.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{gradient_check, GradientReport, ParamCheck};
pub use graph::{Graph, Var};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use sampling::{gaussian_tensor, mix_seed, seeded_gaussian, standard_normal, SeededRng};
pub use tensor::{Precision, Real, Tensor};
