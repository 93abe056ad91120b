//! Parametric skinned body model: blend shapes, kinematic tree, forward
//! kinematics, linear blend skinning and joint regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{canonicalize, rodrigues, Mat3, Vec3};

/// Tolerance for the row-sum invariants of skinning weights and regressor.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

/// Per-axis `[min, max]` bounds on a joint's axis-angle components.
pub type AngleLimits = [[f64; 2]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartTag {
    Body,
    LeftHand,
    RightHand,
    Face,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn hand_tag(self) -> PartTag {
        match self {
            Side::Left => PartTag::LeftHand,
            Side::Right => PartTag::RightHand,
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
    names: Vec<String>,
    tags: Vec<PartTag>,
}

impl KinematicTree {
    /// Builds a tree, rejecting cycles, multiple roots and parents that
    /// do not precede their children.
    pub fn new(parents: Vec<Option<usize>>, names: Vec<String>, tags: Vec<PartTag>) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(Error::InvalidModel("kinematic tree has no joints".into()));
        }
        if names.len() != n || tags.len() != n {
            return Err(Error::InvalidModel(format!(
                "tree has {n} parents but {} names and {} part tags",
                names.len(),
                tags.len()
            )));
        }
        let name = |j: usize| format!("joint {j} ('{}')", names[j]);
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(Error::InvalidModel(format!(
                        "{} has parent {p}, out of range",
                        name(j)
                    )));
                }
            }
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::InvalidModel(format!(
                        "parent array has a cycle through {}",
                        name(start)
                    )));
                }
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&j| parents[j].is_none()).collect();
        if roots != [0] {
            return Err(Error::InvalidModel(format!(
                "tree must have exactly one root at index 0, found roots {roots:?}"
            )));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            let p = p.unwrap();
            if p >= j {
                return Err(Error::InvalidModel(format!(
                    "{} has parent {p}; parents must precede children",
                    name(j)
                )));
            }
        }
        Ok(Self {
            parents,
            names,
            tags,
        })
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tags(&self) -> &[PartTag] {
        &self.tags
    }

    pub fn tag(&self, joint: usize) -> PartTag {
        self.tags[joint]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Joints carrying `tag`, in tree order. The root is never included.
    pub fn joints_tagged(&self, tag: PartTag) -> Vec<usize> {
        (1..self.len()).filter(|&j| self.tags[j] == tag).collect()
    }

    /// True when `joint` lies in the subtree rooted at `ancestor` (inclusive).
    pub fn is_in_subtree(&self, joint: usize, ancestor: usize) -> bool {
        let mut cur = Some(joint);
        while let Some(j) = cur {
            if j == ancestor {
                return true;
            }
            if j < ancestor {
                return false;
            }
            cur = self.parents[j];
        }
        false
    }

    /// The body joint a hand hangs from.
    pub fn wrist(&self, side: Side) -> Result<usize> {
        let tag = side.hand_tag();
        let mut wrists = self
            .joints_tagged(tag)
            .into_iter()
            .filter_map(|j| self.parents[j])
            .filter(|&p| self.tags[p] != tag);
        let wrist = wrists.next().ok_or(Error::MissingPart(tag))?;
        if wrists.any(|w| w != wrist) {
            return Err(Error::InvalidModel(format!(
                "{tag:?} joints attach to more than one body joint"
            )));
        }
        Ok(wrist)
    }

    /// `(shoulder, elbow)` joints of an arm: the two ancestors of the wrist.
    pub fn arm(&self, side: Side) -> Result<(usize, usize)> {
        let wrist = self.wrist(side)?;
        let elbow = self.parents[wrist].ok_or(Error::MissingPart(side.hand_tag()))?;
        let shoulder = self.parents[elbow].ok_or(Error::MissingPart(side.hand_tag()))?;
        Ok((shoulder, elbow))
    }
}

/// A regressed joint that is not part of the kinematic tree (finger tips,
/// landmarks). It follows the part of the joint it is attached to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraJoint {
    pub name: String,
    pub attach: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartVertexMasks {
    pub body: Vec<usize>,
    pub left_hand: Vec<usize>,
    pub right_hand: Vec<usize>,
    pub face: Vec<usize>,
}

impl PartVertexMasks {
    pub fn get(&self, tag: PartTag) -> &[usize] {
        match tag {
            PartTag::Body => &self.body,
            PartTag::LeftHand => &self.left_hand,
            PartTag::RightHand => &self.right_hand,
            PartTag::Face => &self.face,
        }
    }
}

/// Unvalidated model contents. Turned into a [`ModelTemplate`] by
/// [`ModelTemplate::new`], which checks every invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateParts {
    pub rest_vertices: Vec<Vec3>,
    /// `[coefficient][vertex]` displacement basis.
    pub shape_basis: Vec<Vec<Vec3>>,
    pub expression_basis: Vec<Vec<Vec3>>,
    /// Sparse per-vertex `(joint, weight)` rows.
    pub skinning: Vec<Vec<(usize, f64)>>,
    /// Sparse per-joint `(vertex, weight)` rows: one per kinematic joint,
    /// followed by one per extra joint.
    pub regressor: Vec<Vec<(usize, f64)>>,
    pub tree: KinematicTree,
    pub extra_joints: Vec<ExtraJoint>,
    pub angle_limits: Vec<AngleLimits>,
    pub part_vertices: PartVertexMasks,
}

/// Immutable, validated body model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTemplate {
    parts: TemplateParts,
}

impl ModelTemplate {
    pub fn new(parts: TemplateParts) -> Result<Self> {
        validate_parts(&parts)?;
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &TemplateParts {
        &self.parts
    }

    pub fn into_parts(self) -> TemplateParts {
        self.parts
    }

    pub fn num_vertices(&self) -> usize {
        self.parts.rest_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.parts.tree.len()
    }

    /// Number of regressed output joints (kinematic plus extra).
    pub fn num_regressed(&self) -> usize {
        self.parts.regressor.len()
    }

    pub fn num_shape(&self) -> usize {
        self.parts.shape_basis.len()
    }

    pub fn num_expression(&self) -> usize {
        self.parts.expression_basis.len()
    }

    pub fn tree(&self) -> &KinematicTree {
        &self.parts.tree
    }

    pub fn rest_vertices(&self) -> &[Vec3] {
        &self.parts.rest_vertices
    }

    pub fn shape_basis(&self) -> &[Vec<Vec3>] {
        &self.parts.shape_basis
    }

    pub fn expression_basis(&self) -> &[Vec<Vec3>] {
        &self.parts.expression_basis
    }

    pub fn skinning(&self) -> &[Vec<(usize, f64)>] {
        &self.parts.skinning
    }

    pub fn regressor(&self) -> &[Vec<(usize, f64)>] {
        &self.parts.regressor
    }

    pub fn extra_joints(&self) -> &[ExtraJoint] {
        &self.parts.extra_joints
    }

    pub fn angle_limits(&self) -> &[AngleLimits] {
        &self.parts.angle_limits
    }

    pub fn part_vertices(&self) -> &PartVertexMasks {
        &self.parts.part_vertices
    }

    /// Kinematic joint a regressed output joint belongs to.
    pub fn regressed_owner(&self, row: usize) -> usize {
        let j = self.num_joints();
        if row < j {
            row
        } else {
            self.parts.extra_joints[row - j].attach
        }
    }

    /// Part tag of a regressed output joint.
    pub fn regressed_tag(&self, row: usize) -> PartTag {
        self.parts.tree.tag(self.regressed_owner(row))
    }

    /// Vertical extent of the rest mesh.
    pub fn height(&self) -> f64 {
        let (lo, hi) = self
            .parts
            .rest_vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v.y), hi.max(v.y))
            });
        hi - lo
    }
}

fn validate_parts(p: &TemplateParts) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidModel(msg));
    let nv = p.rest_vertices.len();
    let nj = p.tree.len();
    if nv == 0 {
        return bad("model has no vertices".into());
    }
    if let Some(i) = p.rest_vertices.iter().position(|v| !v.iter().all(|x| x.is_finite())) {
        return bad(format!("rest vertex {i} is not finite"));
    }
    for (name, basis) in [("shape", &p.shape_basis), ("expression", &p.expression_basis)] {
        for (b, comp) in basis.iter().enumerate() {
            if comp.len() != nv {
                return bad(format!(
                    "{name} basis component {b} has {} vertices, expected {nv}",
                    comp.len()
                ));
            }
            if let Some(i) = comp.iter().position(|v| !v.iter().all(|x| x.is_finite())) {
                return bad(format!("{name} basis component {b} vertex {i} is not finite"));
            }
        }
    }
    if p.skinning.len() != nv {
        return bad(format!(
            "skinning weights have {} rows, expected {nv}",
            p.skinning.len()
        ));
    }
    for (v, row) in p.skinning.iter().enumerate() {
        let mut sum = 0.0;
        for &(j, w) in row {
            if j >= nj {
                return bad(format!("skinning weight of vertex {v} refers to joint {j} (of {nj})"));
            }
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("skinning weight of vertex {v} on joint {j} is {w}"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return bad(format!("skinning weights of vertex {v} sum to {sum}"));
        }
    }
    if let Some(e) = p.extra_joints.iter().position(|e| e.attach >= nj) {
        return bad(format!(
            "extra joint {e} ('{}') attaches to missing joint {}",
            p.extra_joints[e].name, p.extra_joints[e].attach
        ));
    }
    if p.regressor.len() != nj + p.extra_joints.len() {
        return bad(format!(
            "joint regressor has {} rows, expected {} kinematic + {} extra",
            p.regressor.len(),
            nj,
            p.extra_joints.len()
        ));
    }
    for (r, row) in p.regressor.iter().enumerate() {
        let mut sum = 0.0;
        for &(v, w) in row {
            if v >= nv {
                return bad(format!("regressor row {r} refers to vertex {v} (of {nv})"));
            }
            if !w.is_finite() {
                return bad(format!("regressor row {r} has non-finite weight"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return bad(format!("regressor row {r} sums to {sum}"));
        }
    }
    if p.angle_limits.len() != nj {
        return bad(format!(
            "{} angle limits for {nj} joints",
            p.angle_limits.len()
        ));
    }
    for (j, lim) in p.angle_limits.iter().enumerate() {
        if lim.iter().any(|[lo, hi]| !(lo <= hi)) {
            return bad(format!("angle limits of joint {j} are inverted or NaN"));
        }
    }
    for tag in [PartTag::Body, PartTag::LeftHand, PartTag::RightHand, PartTag::Face] {
        if let Some(&v) = p.part_vertices.get(tag).iter().find(|&&v| v >= nv) {
            return bad(format!("{tag:?} vertex mask refers to vertex {v} (of {nv})"));
        }
    }
    Ok(())
}

/// Whole-body pose, shape and expression coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseState {
    pub global_orient: Vec3,
    /// Local rotations of joints `1..J`, in tree order.
    pub joint_rotations: Vec<Vec3>,
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
}

impl PoseState {
    pub fn zeros(template: &ModelTemplate) -> Self {
        Self {
            global_orient: Vec3::zeros(),
            joint_rotations: vec![Vec3::zeros(); template.num_joints() - 1],
            shape: vec![0.0; template.num_shape()],
            expression: vec![0.0; template.num_expression()],
        }
    }

    /// Local rotation of a joint; the root's is the global orientation.
    pub fn local(&self, joint: usize) -> Vec3 {
        if joint == 0 {
            self.global_orient
        } else {
            self.joint_rotations[joint - 1]
        }
    }

    pub fn set_local(&mut self, joint: usize, axis_angle: Vec3) {
        if joint == 0 {
            self.global_orient = axis_angle;
        } else {
            self.joint_rotations[joint - 1] = axis_angle;
        }
    }

    pub fn check_dims(&self, template: &ModelTemplate) -> Result<()> {
        let j = template.num_joints();
        if self.joint_rotations.len() + 1 != j {
            return Err(Error::dims(format!(
                "pose has {} joint rotations, model has {} non-root joints",
                self.joint_rotations.len(),
                j - 1
            )));
        }
        if self.shape.len() != template.num_shape() {
            return Err(Error::dims(format!(
                "pose has {} shape coefficients, model has {}",
                self.shape.len(),
                template.num_shape()
            )));
        }
        if self.expression.len() != template.num_expression() {
            return Err(Error::dims(format!(
                "pose has {} expression coefficients, model has {}",
                self.expression.len(),
                template.num_expression()
            )));
        }
        Ok(())
    }

    /// Dimension check plus finiteness and the canonical-angle bound.
    pub fn validate(&self, template: &ModelTemplate) -> Result<()> {
        self.check_dims(template)?;
        for (j, r) in std::iter::once(&self.global_orient)
            .chain(self.joint_rotations.iter())
            .enumerate()
        {
            if !r.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidInput(format!("rotation of joint {j} is not finite")));
            }
            if r.norm() > std::f64::consts::PI + 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "rotation of joint {j} has angle {} > π",
                    r.norm()
                )));
            }
        }
        if !self.shape.iter().chain(&self.expression).all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("non-finite shape or expression".into()));
        }
        Ok(())
    }

    /// Copy with every rotation wrapped into the canonical range.
    pub fn canonicalized(&self) -> Self {
        let mut out = self.clone();
        out.global_orient = canonicalize(&out.global_orient);
        for r in &mut out.joint_rotations {
            *r = canonicalize(r);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedMesh {
    pub vertices: Vec<Vec3>,
    pub joints3d: Vec<Vec3>,
    /// Joint-frame to world transforms, one per kinematic joint.
    pub global_transforms: Vec<RigidTransform>,
}

/// Every intermediate of posing, kept for gradient computation.
#[derive(Debug, Clone)]
pub(crate) struct Posing {
    /// Rest vertices with shape and expression offsets applied.
    pub shaped: Vec<Vec3>,
    pub rest_joints: Vec<Vec3>,
    pub transforms: Vec<RigidTransform>,
    pub vertices: Vec<Vec3>,
    pub joints3d: Vec<Vec3>,
}

pub(crate) fn shaped_vertices(template: &ModelTemplate, pose: &PoseState) -> Vec<Vec3> {
    let mut shaped = template.rest_vertices().to_vec();
    for (coef, comp) in pose
        .shape
        .iter()
        .zip(template.shape_basis())
        .chain(pose.expression.iter().zip(template.expression_basis()))
    {
        if *coef == 0.0 {
            continue;
        }
        for (v, d) in shaped.iter_mut().zip(comp) {
            *v += *coef * d;
        }
    }
    shaped
}

fn regress_rows(rows: &[Vec<(usize, f64)>], vertices: &[Vec3]) -> Vec<Vec3> {
    rows.iter()
        .map(|row| row.iter().fold(Vec3::zeros(), |acc, &(v, w)| acc + w * vertices[v]))
        .collect()
}

fn chain_transforms(template: &ModelTemplate, pose: &PoseState, rest_joints: &[Vec3]) -> Vec<RigidTransform> {
    let tree = template.tree();
    let mut out: Vec<RigidTransform> = Vec::with_capacity(tree.len());
    for j in 0..tree.len() {
        let local = rodrigues(&pose.local(j));
        let g = match tree.parent(j) {
            None => RigidTransform {
                rotation: local,
                translation: rest_joints[0],
            },
            Some(p) => {
                let parent = &out[p];
                RigidTransform {
                    rotation: parent.rotation * local,
                    translation: parent.translation
                        + parent.rotation * (rest_joints[j] - rest_joints[p]),
                }
            }
        };
        out.push(g);
    }
    out
}

pub(crate) fn pose_full(template: &ModelTemplate, pose: &PoseState) -> Result<Posing> {
    pose.check_dims(template)?;
    let shaped = shaped_vertices(template, pose);
    let nj = template.num_joints();
    let rest_joints = regress_rows(&template.regressor()[..nj], &shaped);
    let transforms = chain_transforms(template, pose, &rest_joints);
    let vertices: Vec<Vec3> = shaped
        .iter()
        .zip(template.skinning())
        .map(|(x, row)| {
            row.iter().fold(Vec3::zeros(), |acc, &(j, w)| {
                let g = &transforms[j];
                acc + w * (g.rotation * (x - rest_joints[j]) + g.translation)
            })
        })
        .collect();
    let joints3d = regress_rows(template.regressor(), &vertices);
    Ok(Posing {
        shaped,
        rest_joints,
        transforms,
        vertices,
        joints3d,
    })
}

/// Global rigid transform of every joint. The root sits at its shaped rest
/// location; each child is offset from its parent by the shaped rest bone.
pub fn forward_kinematics(template: &ModelTemplate, pose: &PoseState) -> Result<Vec<RigidTransform>> {
    pose.check_dims(template)?;
    let shaped = shaped_vertices(template, pose);
    let rest_joints = regress_rows(&template.regressor()[..template.num_joints()], &shaped);
    Ok(chain_transforms(template, pose, &rest_joints))
}

/// Poses the mesh with linear blend skinning and regresses output joints.
pub fn pose_model(template: &ModelTemplate, pose: &PoseState) -> Result<PosedMesh> {
    let p = pose_full(template, pose)?;
    Ok(PosedMesh {
        vertices: p.vertices,
        joints3d: p.joints3d,
        global_transforms: p.transforms,
    })
}

/// Applies the joint regressor to an arbitrary vertex set.
pub fn regress_joints(template: &ModelTemplate, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
    if vertices.len() != template.num_vertices() {
        return Err(Error::dims(format!(
            "{} vertices given, regressor expects {}",
            vertices.len(),
            template.num_vertices()
        )));
    }
    Ok(regress_rows(template.regressor(), vertices))
}
