//! Hard-constraint physics-informed networks for the Allen-Cahn, KdV and
//! viscous Burgers equations, with adaptive final-layer activations,
//! residual-driven final-layer transfer learning and a finite-difference
//! reference solver.

pub mod activations;
pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pde;
pub mod refsolver;
pub mod trainer;

pub use error::{Error, Result};
