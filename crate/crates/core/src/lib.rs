//! Cross-topology motion retargeting for skeletal animation.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bvh;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod model;
pub mod names;
pub mod skeleton;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use skeleton::{
    compute_tpose, forward_kinematics, height_normalized_mse, matrix_to_rotation6d, root_velocity, rotation6d_to_matrix, JointSpec, Motion,
    Positions, Rotation6D, Skeleton, TPose,
};
