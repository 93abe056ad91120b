//! Part submodels and part-estimate containers: hand submodel extraction,
//! left/right mirroring, expression truncation.

use serde::{Deserialize, Serialize};

use crate::camera::{Vec2, WeakPerspectiveCamera};
use crate::error::{Error, Result};
use crate::model::{
    pose_model, ExtraJoint, KinematicTree, ModelTemplate, PartTag, PartVertexMasks, PoseState,
    PosedMesh, Side, TemplateParts,
};
use crate::rotation::{mirror, Vec3};

/// `[x, y, confidence]` in image pixels.
pub type Keypoint = [f64; 3];

/// Stand-alone hand model cut out of a whole-body template.
///
/// The submodel root is the wrist; its global orientation is the hand's
/// global orientation. Shape coefficients share the whole-body shape space.
#[derive(Debug, Clone, PartialEq)]
pub struct HandSubmodel {
    side: Side,
    vertex_ids: Vec<usize>,
    joint_ids: Vec<usize>,
    regressed_ids: Vec<usize>,
    template: ModelTemplate,
}

impl HandSubmodel {
    pub fn side(&self) -> Side {
        self.side
    }

    /// Whole-body indices of the submodel vertices.
    pub fn vertex_ids(&self) -> &[usize] {
        &self.vertex_ids
    }

    /// Whole-body indices of the submodel's kinematic joints, wrist first.
    pub fn joint_ids(&self) -> &[usize] {
        &self.joint_ids
    }

    /// Whole-body indices of the submodel's regressed output joints.
    pub fn regressed_ids(&self) -> &[usize] {
        &self.regressed_ids
    }

    pub fn template(&self) -> &ModelTemplate {
        &self.template
    }

    /// Number of finger joints (pose length of a hand estimate).
    pub fn num_finger_joints(&self) -> usize {
        self.joint_ids.len() - 1
    }

    pub fn pose_state(&self, global_orient: Vec3, fingers: &[Vec3], shape: &[f64]) -> Result<PoseState> {
        if fingers.len() != self.num_finger_joints() {
            return Err(Error::dims(format!(
                "hand pose has {} joints, submodel has {}",
                fingers.len(),
                self.num_finger_joints()
            )));
        }
        let shape = if shape.is_empty() {
            vec![0.0; self.template.num_shape()]
        } else {
            shape.to_vec()
        };
        Ok(PoseState {
            global_orient,
            joint_rotations: fingers.to_vec(),
            shape,
            expression: Vec::new(),
        })
    }

    pub fn pose(&self, global_orient: Vec3, fingers: &[Vec3], shape: &[f64]) -> Result<PosedMesh> {
        pose_model(&self.template, &self.pose_state(global_orient, fingers, shape)?)
    }

    /// Poses the hand mesh of an estimate.
    pub fn pose_estimate(&self, est: &PartEstimate) -> Result<PosedMesh> {
        if est.part != self.side.hand_tag() {
            return Err(Error::InvalidInput(format!(
                "{:?} estimate given to the {:?} hand submodel",
                est.part, self.side
            )));
        }
        self.pose(est.global_orient, &est.pose, &est.shape)
    }
}

/// Cuts the hand of `side` out of a whole-body template: the wrist and all
/// joints tagged with that hand, every vertex skinned to any of them, and
/// the regressed joints that belong to them.
pub fn extract_hand_submodel(template: &ModelTemplate, side: Side) -> Result<HandSubmodel> {
    let tree = template.tree();
    let wrist = tree.wrist(side)?;
    let mut joint_ids = vec![wrist];
    joint_ids.extend(tree.joints_tagged(side.hand_tag()));
    let mut joint_map = vec![None; template.num_joints()];
    for (i, &j) in joint_ids.iter().enumerate() {
        joint_map[j] = Some(i);
    }

    let vertex_ids: Vec<usize> = template
        .skinning()
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().any(|&(j, w)| w > 0.0 && joint_map[j].is_some()))
        .map(|(v, _)| v)
        .collect();
    let mut vertex_map = vec![None; template.num_vertices()];
    for (i, &v) in vertex_ids.iter().enumerate() {
        vertex_map[v] = Some(i);
    }

    let skinning = vertex_ids
        .iter()
        .map(|&v| {
            let kept: Vec<(usize, f64)> = template.skinning()[v]
                .iter()
                .filter_map(|&(j, w)| joint_map[j].map(|s| (s, w)))
                .collect();
            let sum: f64 = kept.iter().map(|(_, w)| w).sum();
            kept.into_iter().map(|(s, w)| (s, w / sum)).collect()
        })
        .collect();

    let nj = template.num_joints();
    let mut regressed_ids = joint_ids.clone();
    let mut extra_joints = Vec::new();
    for (e, extra) in template.extra_joints().iter().enumerate() {
        if let Some(s) = joint_map[extra.attach] {
            regressed_ids.push(nj + e);
            extra_joints.push(ExtraJoint {
                name: extra.name.clone(),
                attach: s,
            });
        }
    }
    let regressor = regressed_ids
        .iter()
        .map(|&r| {
            let kept: Vec<(usize, f64)> = template.regressor()[r]
                .iter()
                .filter_map(|&(v, w)| vertex_map[v].map(|s| (s, w)))
                .collect();
            let sum: f64 = kept.iter().map(|(_, w)| w).sum();
            if sum.abs() < 1e-12 {
                return Err(Error::InvalidModel(format!(
                    "regressed joint {r} has no weight on {side:?} hand vertices"
                )));
            }
            Ok(kept.into_iter().map(|(s, w)| (s, w / sum)).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let sub_tree = KinematicTree::new(
        joint_ids
            .iter()
            .map(|&j| tree.parent(j).and_then(|p| joint_map[p]))
            .enumerate()
            .map(|(i, p)| if i == 0 { None } else { p })
            .collect(),
        joint_ids.iter().map(|&j| tree.names()[j].clone()).collect(),
        joint_ids.iter().map(|&j| tree.tag(j)).collect(),
    )?;
    let restrict = |comp: &Vec<Vec3>| vertex_ids.iter().map(|&v| comp[v]).collect::<Vec<_>>();
    let mut masks = PartVertexMasks::default();
    match side {
        Side::Left => masks.left_hand = (0..vertex_ids.len()).collect(),
        Side::Right => masks.right_hand = (0..vertex_ids.len()).collect(),
    }
    let sub = ModelTemplate::new(TemplateParts {
        rest_vertices: vertex_ids.iter().map(|&v| template.rest_vertices()[v]).collect(),
        shape_basis: template.shape_basis().iter().map(restrict).collect(),
        expression_basis: Vec::new(),
        skinning,
        regressor,
        tree: sub_tree,
        extra_joints,
        angle_limits: joint_ids.iter().map(|&j| template.angle_limits()[j]).collect(),
        part_vertices: masks,
    })?;
    Ok(HandSubmodel {
        side,
        vertex_ids,
        joint_ids,
        regressed_ids,
        template: sub,
    })
}

/// Output of one part regressor (body, hand, or face module).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartEstimate {
    pub part: PartTag,
    #[serde(default = "Vec3::zeros")]
    pub global_orient: Vec3,
    /// Local rotations of the joints tagged with `part`, in tree order.
    #[serde(default)]
    pub pose: Vec<Vec3>,
    #[serde(default)]
    pub shape: Vec<f64>,
    pub camera: WeakPerspectiveCamera,
    /// Body: one per regressed whole-body joint. Hands: one per regressed
    /// hand-submodel joint (wrist first).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints2d: Option<Vec<Keypoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<Vec<f64>>,
}

impl PartEstimate {
    /// Joint count the pose of `part` must have on `template`.
    pub fn expected_pose_len(template: &ModelTemplate, part: PartTag) -> usize {
        template.tree().joints_tagged(part).len()
    }

    pub fn validate(&self, template: &ModelTemplate) -> Result<()> {
        let want = Self::expected_pose_len(template, self.part);
        if self.pose.len() != want {
            return Err(Error::dims(format!(
                "{:?} estimate has {} joint rotations, expected {want}",
                self.part,
                self.pose.len()
            )));
        }
        if !self.shape.is_empty() && self.shape.len() != template.num_shape() {
            return Err(Error::dims(format!(
                "{:?} estimate has {} shape coefficients, model has {}",
                self.part,
                self.shape.len(),
                template.num_shape()
            )));
        }
        self.camera.validate()?;
        let finite = std::iter::once(&self.global_orient)
            .chain(&self.pose)
            .all(|r| r.iter().all(|x| x.is_finite()))
            && self.shape.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidInput(format!("{:?} estimate is not finite", self.part)));
        }
        if let Some(kps) = &self.keypoints2d {
            for (i, k) in kps.iter().enumerate() {
                if !(k[0].is_finite() && k[1].is_finite()) {
                    return Err(Error::InvalidInput(format!("keypoint {i} is not finite")));
                }
                if !(0.0..=1.0).contains(&k[2]) {
                    return Err(Error::InvalidInput(format!(
                        "keypoint {i} confidence {} is outside [0, 1]",
                        k[2]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        self.keypoints2d
            .as_ref()
            .filter(|k| !k.is_empty())
            .map(|k| k.iter().map(|k| k[2]).sum::<f64>() / k.len() as f64)
    }

    pub fn keypoint(&self, i: usize) -> Option<Vec2> {
        self.keypoints2d
            .as_ref()
            .and_then(|k| k.get(i))
            .map(|k| Vec2::new(k[0], k[1]))
    }
}

/// Reflects a pose across the body's sagittal plane.
pub fn mirror_pose(pose: &[Vec3], global_orient: &Vec3) -> (Vec<Vec3>, Vec3) {
    (pose.iter().map(mirror).collect(), mirror(global_orient))
}

/// Keeps the leading `len` expression coefficients.
pub fn truncate_expression(expr: &[f64], len: usize) -> Result<Vec<f64>> {
    if expr.len() < len {
        return Err(Error::TooShort {
            got: expr.len(),
            need: len,
        });
    }
    Ok(expr[..len].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pose_model, regress_joints};
    use crate::rotation::{rodrigues, Mat3};
    use crate::toy::{make_toy_model, ToyConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelTemplate {
        make_toy_model(&ToyConfig::default(), 21).unwrap()
    }

    #[test]
    fn submodel_joint_count_is_tagged_plus_wrist() {
        let t = toy();
        for side in [Side::Left, Side::Right] {
            let h = extract_hand_submodel(&t, side).unwrap();
            assert_eq!(
                h.template().num_joints(),
                t.tree().joints_tagged(side.hand_tag()).len() + 1
            );
            assert_eq!(h.joint_ids()[0], t.tree().wrist(side).unwrap());
            // wrist + 6 finger joints + 2 tips
            assert_eq!(h.template().num_regressed(), 9);
        }
    }

    #[test]
    fn missing_hand_is_reported() {
        let t = toy();
        let mut parts = t.parts().clone();
        let tags: Vec<PartTag> = parts
            .tree
            .tags()
            .iter()
            .map(|&g| if g == PartTag::LeftHand { PartTag::Body } else { g })
            .collect();
        parts.tree = KinematicTree::new(parts.tree.parents().to_vec(), parts.tree.names().to_vec(), tags).unwrap();
        let t = ModelTemplate::new(parts).unwrap();
        assert!(matches!(
            extract_hand_submodel(&t, Side::Left),
            Err(Error::MissingPart(PartTag::LeftHand))
        ));
    }

    #[test]
    fn identity_pose_reproduces_rest_vertices() {
        let t = toy();
        let h = extract_hand_submodel(&t, Side::Right).unwrap();
        let mesh = h.pose(Vec3::zeros(), &[Vec3::zeros(); 6], &[]).unwrap();
        for (a, &v) in mesh.vertices.iter().zip(h.vertex_ids()) {
            assert!((a - t.rest_vertices()[v]).norm() < 1e-12);
        }
    }

    #[test]
    fn submodel_matches_whole_body_hand_region() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for side in [Side::Left, Side::Right] {
            let h = extract_hand_submodel(&t, side).unwrap();
            let fingers: Vec<Vec3> = (0..h.num_finger_joints())
                .map(|_| Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)))
                .collect();
            let shape: Vec<f64> = (0..t.num_shape()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut whole = PoseState::zeros(&t);
            whole.shape = shape.clone();
            for (&j, f) in h.joint_ids()[1..].iter().zip(&fingers) {
                whole.set_local(j, *f);
            }
            let wb = pose_model(&t, &whole).unwrap();
            let sub = h.pose(Vec3::zeros(), &fingers, &shape).unwrap();
            let max_diff = h
                .vertex_ids()
                .iter()
                .zip(&sub.vertices)
                .map(|(&v, s)| (wb.vertices[v] - s).norm())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-9, "{max_diff}");
            for (i, &r) in h.regressed_ids().iter().enumerate() {
                assert!((wb.joints3d[r] - sub.joints3d[i]).norm() < 1e-9);
            }
            // the submodel's wrist is the whole-body wrist
            let rest = regress_joints(&t, t.rest_vertices()).unwrap();
            assert!((sub.joints3d[0] - wb.global_transforms[h.joint_ids()[0]].translation).norm() < 1e-9);
            assert!((rest[h.joint_ids()[0]] - h.pose(Vec3::zeros(), &fingers, &[]).unwrap().joints3d[0]).norm() < 1e-9);
        }
    }

    #[test]
    fn mirror_rules() {
        let (p, g) = mirror_pose(&[Vec3::zeros(), Vec3::new(0.1, 0.2, 0.3)], &Vec3::new(1.0, 1.0, 1.0));
        assert_eq!(p, vec![Vec3::zeros(), Vec3::new(0.1, -0.2, -0.3)]);
        assert_eq!(g, Vec3::new(1.0, -1.0, -1.0));
    }

    #[test]
    fn truncation() {
        let fifty: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(truncate_expression(&fifty, 10).unwrap(), (0..10).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(truncate_expression(&fifty[..10], 10).unwrap(), fifty[..10].to_vec());
        assert_eq!(truncate_expression(&[0.0; 12], 10).unwrap(), vec![0.0; 10]);
        assert!(matches!(truncate_expression(&[0.0; 5], 10), Err(Error::TooShort { got: 5, need: 10 })));
    }

    #[test]
    fn estimate_validation() {
        let t = toy();
        let cam = WeakPerspectiveCamera::new(100.0, Vec2::zeros()).unwrap();
        let mut est = PartEstimate {
            part: PartTag::RightHand,
            global_orient: Vec3::zeros(),
            pose: vec![Vec3::zeros(); 6],
            shape: vec![],
            camera: cam,
            keypoints2d: Some(vec![[1.0, 2.0, 0.5]; 9]),
            expression: None,
        };
        est.validate(&t).unwrap();
        assert_eq!(est.mean_confidence(), Some(0.5));
        est.keypoints2d.as_mut().unwrap()[3][2] = 1.5;
        assert!(est.validate(&t).is_err());
        est.keypoints2d = None;
        est.pose.pop();
        assert!(matches!(est.validate(&t), Err(Error::DimensionMismatch(_))));
    }

    fn axis_angle() -> impl Strategy<Value = Vec3> {
        (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn mirror_is_norm_preserving_involution(pose in proptest::collection::vec(axis_angle(), 0..8), g in axis_angle()) {
            let (p1, g1) = mirror_pose(&pose, &g);
            let (p2, g2) = mirror_pose(&p1, &g1);
            prop_assert_eq!(&p2, &pose);
            prop_assert_eq!(g2, g);
            for (a, b) in p1.iter().zip(&pose) {
                prop_assert_eq!(a.norm(), b.norm());
            }
            let m = Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0));
            prop_assert!((rodrigues(&g1) - m * rodrigues(&g) * m).amax() < 1e-9);
        }
    }
}
