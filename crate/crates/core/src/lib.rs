//! Correlation-grouped multi-task curriculum learning over frozen features.
//!
//! Tasks are ranked by the sum of their label correlations with every other
//! task. The top half is learned first as one multi-task group; its parameters
//! then initialize the remaining group, which trains on a blend of both groups'
//! losses.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not care.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod labels;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{DataError, Error, Result};
pub use labels::{correlation_split, pearson_matrix, split_groups, total_dependency, GroupSplit, LabelMatrix};
pub use model::{init_from, multitask_loss, FrozenBackbone, GroupModel, TaskHead};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type TaskHead64 = TaskHead<f64>;
pub type TaskHead32 = TaskHead<f32>;
pub type GroupModel64 = GroupModel<f64>;
pub type GroupModel32 = GroupModel<f32>;
pub type GroupSplit64 = GroupSplit<f64>;
