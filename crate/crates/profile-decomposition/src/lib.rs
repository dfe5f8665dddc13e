//! Numerical profile decompositions for bounded sequences in `H^{1,2}(M)` on manifolds
//! of bounded geometry.
//!
//! The core is generic over the scalar type (`f32` or `f64`); the aliases below fix `f64`.

pub mod cli;
pub mod covering;
pub mod decomposition;
pub mod error;
pub mod funcspace;
pub mod geometry;
pub mod infinity;
pub mod linalg;
pub mod scalar;
pub mod trailing;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Model = geometry::ManifoldModel<f64>;
pub type Chart = geometry::NormalChart<f64>;
pub type Net = covering::DiscreteNet<f64>;
pub type Partition = covering::PartitionOfUnity<f64>;
pub type Grid = covering::QuadratureGrid<f64>;
pub type Function = funcspace::ManifoldFunction<f64>;
pub type Sequence = funcspace::FunctionSequence<f64>;
pub type Trailing = trailing::TrailingSystem<f64>;
pub type Glued = infinity::GluedManifold<f64>;
pub type Report = decomposition::DecompositionReport<f64>;
