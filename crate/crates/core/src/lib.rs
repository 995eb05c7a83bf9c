//! Sheaf neural networks with Bayesian restriction maps, sized for small
//! graphs on a single core.
//!
//! The crate builds up from dense linear algebra ([`linalg`]) and rotation
//! group machinery ([`rotations`]) to cellular sheaves and their Laplacians
//! ([`sheaf`]), sheaf diffusion ([`diffusion`]), a small reverse-mode tape and
//! the sheaf convolution model ([`nn`]), variational objectives
//! ([`variational`]), uncertainty reports ([`uq`]), and dataset handling
//! ([`data`]).
//!
//! Numeric kernels are generic over the scalar type through [`Real`]
//! (instantiable at `f32` or `f64`); the aliases below fix the `f64`
//! instantiations used by the training pipeline and CLI.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod rotations;
pub mod scalar;
pub mod sheaf;
pub mod uq;
pub mod variational;

pub use error::{Error, Result};
pub use scalar::Real;

/// Dense `f64` matrix.
pub type Mat = linalg::Matrix<f64>;
/// `f64` rotation matrix in SO(n).
pub type Rot = rotations::Rotation<f64>;
/// `f64` graph with features and labels.
pub type GraphF = sheaf::Graph<f64>;
/// `f64` cellular sheaf.
pub type SheafF = sheaf::CellularSheaf<f64>;
/// Block-sparse `f64` operator.
pub type BlockOpF = sheaf::BlockOperator<f64>;
/// Stacked `f64` node features.
pub type FeatF = diffusion::FeatureMatrix<f64>;
