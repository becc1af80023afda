//! Text-guided RGB and 3D anomaly detection head.
//!
//! Patch features from an RGB and a point-cloud backbone are mapped into
//! each other's space and into a shared text space. At test time the
//! mapping residuals and the distance to a class text anchor form the
//! anomaly map.

pub mod error;
pub mod eval;
pub mod featureprovider;
pub mod gacm;
pub mod gradsuite;
pub mod io;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod numerics;
pub mod octa;
pub mod model;
pub mod projectors;
pub mod scoring;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::{PixelMask, ValidityMask};
pub use numerics::{DType, Scalar, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
