//! Copy-paste integration of part estimates into one whole-body pose.
//!
//! Finger, jaw and expression parameters are transplanted directly. The
//! hand module reports a global hand orientation, which is turned into a
//! local wrist rotation by undoing the body's kinematic chain above the
//! wrist.

use serde::{Deserialize, Serialize};

use crate::camera::WeakPerspectiveCamera;
use crate::error::{Error, Result};
use crate::model::{forward_kinematics, ModelTemplate, PartTag, PoseState, Side};
use crate::parts::{truncate_expression, PartEstimate};
use crate::rotation::{rodrigues, rodrigues_inverse, Mat3, Vec3};

/// Which estimate a joint's rotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Body,
    LeftHand,
    RightHand,
    Face,
    /// Not covered by any estimate; left at the rest rotation.
    Default,
}

impl From<PartTag> for Provenance {
    fn from(tag: PartTag) -> Self {
        match tag {
            PartTag::Body => Provenance::Body,
            PartTag::LeftHand => Provenance::LeftHand,
            PartTag::RightHand => Provenance::RightHand,
            PartTag::Face => Provenance::Face,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WholeBodyResult {
    pub pose: PoseState,
    pub camera: WeakPerspectiveCamera,
    /// One entry per kinematic joint; entry 0 is the global orientation.
    pub provenance: Vec<Provenance>,
}

fn check_joint(template: &ModelTemplate, joint: usize) -> Result<()> {
    if joint >= template.num_joints() {
        return Err(Error::BadIndex {
            index: joint,
            count: template.num_joints(),
        });
    }
    Ok(())
}

/// Rotation block of the forward-kinematics transform of `joint`.
pub fn global_orientation_of_joint(template: &ModelTemplate, pose: &PoseState, joint: usize) -> Result<Mat3> {
    check_joint(template, joint)?;
    Ok(forward_kinematics(template, pose)?[joint].rotation)
}

/// Product of local rotations from the root down to `joint`.
pub fn global_from_local(template: &ModelTemplate, pose: &PoseState, joint: usize) -> Result<Mat3> {
    check_joint(template, joint)?;
    pose.check_dims(template)?;
    let tree = template.tree();
    let mut rot = rodrigues(&pose.local(joint));
    let mut cur = tree.parent(joint);
    while let Some(p) = cur {
        rot = rodrigues(&pose.local(p)) * rot;
        cur = tree.parent(p);
    }
    Ok(rot)
}

/// Global rotation of the parent frame of `joint` (identity for the root).
pub fn parent_global_rotation(template: &ModelTemplate, pose: &PoseState, joint: usize) -> Result<Mat3> {
    check_joint(template, joint)?;
    match template.tree().parent(joint) {
        None => Ok(Mat3::identity()),
        Some(p) => global_from_local(template, pose, p),
    }
}

/// Local rotation that gives `joint` the global orientation `target`,
/// with all other joints of `pose` held fixed.
pub fn local_from_global(
    template: &ModelTemplate,
    pose: &PoseState,
    joint: usize,
    target: &Mat3,
) -> Result<Vec3> {
    let parent = parent_global_rotation(template, pose, joint)?;
    rodrigues_inverse(&(parent.transpose() * target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyPasteOptions {
    /// Hand estimates whose mean keypoint confidence falls below this are
    /// ignored (body wrist, flat fingers).
    pub hand_confidence_threshold: f64,
}

impl Default for CopyPasteOptions {
    fn default() -> Self {
        Self {
            hand_confidence_threshold: 0.3,
        }
    }
}

fn expect_part(est: &PartEstimate, part: PartTag) -> Result<()> {
    if est.part != part {
        return Err(Error::InvalidInput(format!(
            "expected a {part:?} estimate, got {:?}",
            est.part
        )));
    }
    Ok(())
}

/// True when a hand estimate is trusted by copy-paste.
pub fn hand_is_confident(est: &PartEstimate, opts: &CopyPasteOptions) -> bool {
    est.mean_confidence()
        .is_none_or(|c| c >= opts.hand_confidence_threshold)
}

/// Transplants part parameters into one whole-body pose.
pub fn copy_paste(
    template: &ModelTemplate,
    body: &PartEstimate,
    left: Option<&PartEstimate>,
    right: Option<&PartEstimate>,
    face: Option<&PartEstimate>,
    opts: &CopyPasteOptions,
) -> Result<WholeBodyResult> {
    expect_part(body, PartTag::Body)?;
    body.validate(template)?;
    let tree = template.tree();
    let mut pose = PoseState::zeros(template);
    let mut provenance = vec![Provenance::Default; template.num_joints()];

    pose.global_orient = body.global_orient;
    provenance[0] = Provenance::Body;
    for (j, r) in tree.joints_tagged(PartTag::Body).into_iter().zip(&body.pose) {
        pose.set_local(j, *r);
        provenance[j] = Provenance::Body;
    }
    if !body.shape.is_empty() {
        pose.shape.clone_from(&body.shape);
    }

    for (side, est) in [(Side::Left, left), (Side::Right, right)] {
        let Some(est) = est else { continue };
        expect_part(est, side.hand_tag())?;
        est.validate(template)?;
        if !hand_is_confident(est, opts) {
            continue;
        }
        let wrist = tree.wrist(side)?;
        // the wrist's parent chain only involves body joints, already set
        let local = local_from_global(template, &pose, wrist, &rodrigues(&est.global_orient))?;
        pose.set_local(wrist, local);
        provenance[wrist] = side.hand_tag().into();
        for (j, r) in tree.joints_tagged(side.hand_tag()).into_iter().zip(&est.pose) {
            pose.set_local(j, *r);
            provenance[j] = side.hand_tag().into();
        }
    }

    if let Some(face) = face {
        expect_part(face, PartTag::Face)?;
        face.validate(template)?;
        for (j, r) in tree.joints_tagged(PartTag::Face).into_iter().zip(&face.pose) {
            pose.set_local(j, *r);
            provenance[j] = Provenance::Face;
        }
        if let Some(expr) = &face.expression {
            pose.expression = truncate_expression(expr, template.num_expression())?;
        }
    }

    Ok(WholeBodyResult {
        pose,
        camera: body.camera,
        provenance,
    })
}

/// Splits a whole-body result back into part estimates.
///
/// Hands report the whole-body wrist orientation as their global
/// orientation, so feeding the parts back into [`copy_paste`] reproduces
/// the pose.
pub fn split_into_parts(
    template: &ModelTemplate,
    result: &WholeBodyResult,
) -> Result<(PartEstimate, PartEstimate, PartEstimate, PartEstimate)> {
    let tree = template.tree();
    let pose = &result.pose;
    let pick = |tag: PartTag| -> Vec<Vec3> {
        tree.joints_tagged(tag).into_iter().map(|j| pose.local(j)).collect()
    };
    let fk = forward_kinematics(template, pose)?;
    let hand = |side: Side| -> Result<PartEstimate> {
        let wrist = tree.wrist(side)?;
        Ok(PartEstimate {
            part: side.hand_tag(),
            global_orient: rodrigues_inverse(&fk[wrist].rotation)?,
            pose: pick(side.hand_tag()),
            shape: pose.shape.clone(),
            camera: result.camera,
            keypoints2d: None,
            expression: None,
        })
    };
    let body = PartEstimate {
        part: PartTag::Body,
        global_orient: pose.global_orient,
        pose: pick(PartTag::Body),
        shape: pose.shape.clone(),
        camera: result.camera,
        keypoints2d: None,
        expression: None,
    };
    let face = PartEstimate {
        part: PartTag::Face,
        global_orient: Vec3::zeros(),
        pose: pick(PartTag::Face),
        shape: Vec::new(),
        camera: result.camera,
        keypoints2d: None,
        expression: Some(pose.expression.clone()),
    };
    Ok((body, hand(Side::Left)?, hand(Side::Right)?, face))
}
