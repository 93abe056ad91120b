//! Whole-body parametric model with part-estimate integration.
//!
//! The crate poses a skinned articulated body model, merges independently
//! estimated body, hand and face parameters into one whole-body pose
//! (copy-paste, wrist network, or optimization), and scores results with
//! standard pose metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod camera;
pub mod error;
pub mod fit;
pub mod integrate;
pub mod io;
pub mod metrics;
pub mod model;
pub mod parts;
pub mod rotation;
pub mod scenario;
pub mod toy;
pub mod wristnet;

pub use camera::{Vec2, WeakPerspectiveCamera};
pub use error::{Error, Result};
pub use model::{
    forward_kinematics, pose_model, regress_joints, KinematicTree, ModelTemplate, PartTag,
    PoseState, PosedMesh, RigidTransform, Side,
};
pub use rotation::{Mat3, Vec3};
