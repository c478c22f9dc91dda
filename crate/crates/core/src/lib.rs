//! Hybrid diffeomorphic atlas building.

pub mod atlas;
pub mod cli;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod prior;
pub mod registration;
pub mod scalar;
pub mod spectral;
pub mod synth;

pub use atlas::{AtlasConfig, AtlasState, Cohort};
pub use error::{Error, Result};
pub use grid::{DeformationPair, GridShape, ScalarImage, VectorField};
pub use scalar::Real;
pub use spectral::{MetricOperator, MetricParams, MomentumField, NormVariant};

pub type Image = ScalarImage<f64>;
pub type Field = VectorField<f64>;
pub type Deformation = DeformationPair<f64>;
pub type Image32 = ScalarImage<f32>;
pub type Field32 = VectorField<f32>;
pub type Deformation32 = DeformationPair<f32>;
