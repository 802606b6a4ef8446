//! Continuous normalizing flows on hyperspheres.
//!
//! Vector fields on `S^n` are combinations `Σ_i f_i(t, z) ∇z_i` of the
//! projected coordinate fields, with coefficients produced by a small
//! neural network. Flows are integrated with fixed-step RK4 plus a
//! normalizing retraction; log-densities are transported along with the
//! points, and gradients come either from the cotangent-lift adjoint or from
//! differentiating the discrete integrator directly.

pub mod density;
pub mod diagnostics;
pub mod error;
pub mod field_net;
pub mod flow;
pub mod geometry;
mod linalg;
pub mod trainer;
pub mod vector_field;

pub use error::{FlowError, Result};
pub use field_net::{CoefficientNet, ParamGradient};
pub use geometry::{Manifold, ManifoldPoint, Sphere, TangentVector};
