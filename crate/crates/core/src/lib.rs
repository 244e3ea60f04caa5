//! Range-view LiDAR detection building blocks.
//!
//! The numeric modules are generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what training, the file
//! formats and the command line use.

pub mod assign;
pub mod augment;
pub mod error;
pub mod evalap;
pub mod geom;
pub mod grad;
pub mod gradsuite;
pub mod io;
pub mod metakernel;
pub mod num;
pub mod pipeline;
pub mod postproc;
pub mod rimg;
pub mod synth;
pub mod targets;

pub use error::{Error, Result};
pub use num::Real;

pub type Box7 = geom::OrientedBox<f64>;
pub type Point3 = rimg::CartesianPoint<f64>;
pub type Spherical = rimg::SphericalCoord<f64>;
pub type RangeImage64 = rimg::RangeImage<f64>;
pub type BeamTable64 = rimg::BeamTable<f64>;
pub type Tensor64 = grad::Tensor<f64>;
pub type Tape64 = grad::Tape<f64>;
pub type MetaKernel64 = metakernel::MetaKernelLayer<f64>;
pub type Proposal64 = postproc::Proposal<f64>;
pub type TargetVector64 = targets::TargetVector<f64>;
