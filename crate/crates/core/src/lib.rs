//! Wishart projection mechanism for differential privacy.
//!
//! Samplers for the noise-free and noisy projection mechanisms, closed-form
//! accountants for the vector, small-rank and large-rank regimes, a Monte Carlo
//! privacy-profile estimator, separation and membership-inference tooling, and
//! desk-scale private training loops.

pub mod accountants;
pub mod attacks;
pub mod cli;
pub mod error;
pub mod mechanisms;
pub mod profiler;
pub mod randmat;
pub mod specialfn;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use randmat::{Matrix, Seed, Vector, WishartDraw};
