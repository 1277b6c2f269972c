//! Spinodoid metamaterials: geometry, homogenization, an equivariant
//! elasticity surrogate and gradient-based inverse design.

pub mod dataset;
pub mod design;
pub mod equivariant;
pub mod error;
pub mod geometry;
pub mod homogenization;
pub mod optim;
pub mod sampling;
pub mod surrogate;
pub mod tensor;
pub mod training;

pub use dataset::{Dataset, DatasetRecord};
pub use design::{DesignOptions, DesignProblem};
pub use error::{Error, Result};
pub use geometry::{GeometryConfig, SpinodoidKind, StructureParams, VoxelGrid};
pub use homogenization::{Materials, PhaseMaterial, SolverConfig};
pub use surrogate::SurrogateModel;
pub use tensor::{ElasticityTensor, RodriguesAngles, Rotation};
pub use training::TrainConfig;

pub use nalgebra;
