//! Optimization-based integration.
//!
//! Whole-body parameters are fitted to 2D keypoints, hand-module meshes and
//! a shape prior in two stages. Stage one fits global orientation, body
//! joints, shape and camera to the keypoints. Stage two frees every
//! parameter, adds the hand-mesh term, and anchors the body joints at their
//! stage-one locations.
//!
//! The descent is limited-memory BFGS with a backtracking (Armijo) line
//! search on the total cost, so accepted costs never increase. Gradients
//! are analytic by default; central differences are available as a slower
//! fallback and as the reference the analytic path is tested against.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{Vec2, WeakPerspectiveCamera};
use crate::error::{Error, Result};
use crate::integrate::WholeBodyResult;
use crate::model::{pose_full, ModelTemplate, PartTag, PoseState, PosedMesh, Side};
use crate::parts::{extract_hand_submodel, HandSubmodel, Keypoint, PartEstimate};
use crate::rotation::{left_jacobian, Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermWeights {
    pub w2d: f64,
    pub wmesh: f64,
    pub wpri: f64,
    pub w3d: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            w2d: 1.0,
            wmesh: 1.0,
            wpri: 1e-3,
            w3d: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Length of the first trial step of each stage, in parameter units.
    pub step_size: f64,
    pub term_weights: TermWeights,
    pub fd_step: f64,
    /// A stage stops when the relative cost decrease of an accepted step
    /// falls below this.
    pub convergence_tol: f64,
    pub gradient: GradientMode,
    /// Number of correction pairs kept by L-BFGS.
    pub history: usize,
    /// Upper bound on the length of any trial step; unbounded when `None`.
    pub max_step: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 300,
            stage2_iters: 300,
            step_size: 0.1,
            term_weights: TermWeights::default(),
            fd_step: 1e-5,
            convergence_tol: 1e-12,
            gradient: GradientMode::Analytic,
            history: 10,
            max_step: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.term_weights;
        let positive = [self.step_size, self.fd_step, self.convergence_tol, w.w2d, w.wmesh, w.wpri, w.w3d]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        let step_ok = self.max_step.is_none_or(|m| m.is_finite() && m > 0.0);
        if !positive || !step_ok || self.stage1_iters == 0 || self.stage2_iters == 0 || self.history == 0 {
            return Err(Error::InvalidInput(
                "fit weights, steps and tolerances must be positive and iteration counts at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted cost terms; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub f2d: f64,
    pub fmesh: f64,
    pub fpri: f64,
    pub f3d: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    /// Total cost at the start and after every accepted step.
    pub costs: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub stages: Vec<StageReport>,
    /// Unweighted term values at the returned parameters.
    pub final_terms: CostTerms,
    /// Not serialized, so saved reports stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Σ conf·‖project(J) − k‖² over keypoints with a regressed-joint partner.
pub fn cost_2d(
    template: &ModelTemplate,
    pose: &PoseState,
    camera: &WeakPerspectiveCamera,
    keypoints: &[Keypoint],
) -> Result<f64> {
    if keypoints.len() != template.num_regressed() {
        return Err(Error::dims(format!(
            "{} keypoints for {} regressed joints",
            keypoints.len(),
            template.num_regressed()
        )));
    }
    let joints = pose_full(template, pose)?.joints3d;
    Ok(reprojection(camera, &joints, keypoints))
}

fn reprojection(camera: &WeakPerspectiveCamera, joints: &[Vec3], keypoints: &[Keypoint]) -> f64 {
    joints
        .iter()
        .zip(keypoints)
        .filter(|(_, k)| k[2] > 0.0)
        .map(|(j, k)| k[2] * (camera.project_point(j) - Vec2::new(k[0], k[1])).norm_squared())
        .sum()
}

/// Hand-module mesh prepared as a fitting target.
#[derive(Debug, Clone)]
pub struct HandTarget {
    submodel: HandSubmodel,
    /// Hand-module vertices relative to the hand-module wrist joint.
    relative: Vec<Vec3>,
}

impl HandTarget {
    pub fn new(template: &ModelTemplate, estimate: &PartEstimate) -> Result<Self> {
        let side = match estimate.part {
            PartTag::LeftHand => Side::Left,
            PartTag::RightHand => Side::Right,
            other => {
                return Err(Error::InvalidInput(format!(
                    "mesh target needs a hand estimate, got {other:?}"
                )))
            }
        };
        let submodel = extract_hand_submodel(template, side)?;
        let mesh = submodel.pose_estimate(estimate)?;
        let wrist = mesh.joints3d[0];
        Ok(Self {
            relative: mesh.vertices.iter().map(|v| v - wrist).collect(),
            submodel,
        })
    }

    fn wrist_row(&self) -> usize {
        self.submodel.regressed_ids()[0]
    }

    fn cost(&self, vertices: &[Vec3], joints: &[Vec3]) -> f64 {
        let wrist = joints[self.wrist_row()];
        self.submodel
            .vertex_ids()
            .iter()
            .zip(&self.relative)
            .map(|(&v, r)| (vertices[v] - wrist - r).norm_squared())
            .sum()
    }
}

/// Squared vertex distance between the whole-body hand region and the hand
/// estimate's mesh, after moving the latter onto the whole-body wrist.
pub fn cost_mesh(
    wholebody: &PosedMesh,
    hand: &PartEstimate,
    template: &ModelTemplate,
    side: Side,
) -> Result<f64> {
    if hand.part != side.hand_tag() {
        return Err(Error::InvalidInput(format!(
            "{:?} estimate given for the {side:?} hand",
            hand.part
        )));
    }
    if wholebody.vertices.len() != template.num_vertices()
        || wholebody.joints3d.len() != template.num_regressed()
    {
        return Err(Error::dims("posed mesh does not match the template"));
    }
    let target = HandTarget::new(template, hand)?;
    Ok(target.cost(&wholebody.vertices, &wholebody.joints3d))
}

pub fn cost_prior(shape: &[f64]) -> f64 {
    shape.iter().map(|b| b * b).sum()
}

pub fn cost_3d_anchor(joints: &[Vec3], anchor: &[Vec3]) -> Result<f64> {
    if joints.len() != anchor.len() {
        return Err(Error::dims(format!(
            "{} joints vs {} anchors",
            joints.len(),
            anchor.len()
        )));
    }
    Ok(joints.iter().zip(anchor).map(|(j, a)| (j - a).norm_squared()).sum())
}

/// Loss weights of the hand regressor's training objective, in the order
/// pose, 3D joints, 2D joints, shape regularizer.
pub const TRAINING_LOSS_WEIGHTS: [f64; 4] = [10.0, 100.0, 10.0, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs {
    pub pose: Vec<Vec3>,
    pub joints3d: Vec<Vec3>,
    pub joints2d: Vec<Vec2>,
    pub shape: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingLosses {
    pub theta: f64,
    pub joints3d: f64,
    pub joints2d: f64,
    pub reg: f64,
    pub total: f64,
}

impl TrainingLosses {
    pub fn combine(theta: f64, joints3d: f64, joints2d: f64, reg: f64) -> Self {
        let [l1, l2, l3, l4] = TRAINING_LOSS_WEIGHTS;
        Self {
            theta,
            joints3d,
            joints2d,
            reg,
            total: l1 * theta + l2 * joints3d + l3 * joints2d + l4 * reg,
        }
    }
}

/// Squared L2 on pose and 3D joints, L1 on 2D joints, squared norm of the
/// predicted shape.
pub fn training_losses(pred: &LossInputs, gt: &LossInputs) -> Result<TrainingLosses> {
    if pred.pose.len() != gt.pose.len()
        || pred.joints3d.len() != gt.joints3d.len()
        || pred.joints2d.len() != gt.joints2d.len()
    {
        return Err(Error::dims("prediction and ground truth differ in size"));
    }
    let theta = pred.pose.iter().zip(&gt.pose).map(|(a, b)| (a - b).norm_squared()).sum();
    let j3 = pred.joints3d.iter().zip(&gt.joints3d).map(|(a, b)| (a - b).norm_squared()).sum();
    let j2 = pred.joints2d.iter().zip(&gt.joints2d).map(|(a, b)| (a - b).abs().sum()).sum();
    Ok(TrainingLosses::combine(theta, j3, j2, cost_prior(&pred.shape)))
}

/// Flat parameter vector layout:
/// `[joint rotations (3·J, root first) | shape (B) | scale, tx, ty]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub num_joints: usize,
    pub num_shape: usize,
}

impl ParamLayout {
    pub fn of(template: &ModelTemplate) -> Self {
        Self {
            num_joints: template.num_joints(),
            num_shape: template.num_shape(),
        }
    }

    pub fn len(&self) -> usize {
        3 * self.num_joints + self.num_shape + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rotation(&self, joint: usize) -> std::ops::Range<usize> {
        3 * joint..3 * joint + 3
    }

    pub fn shape(&self) -> std::ops::Range<usize> {
        3 * self.num_joints..3 * self.num_joints + self.num_shape
    }

    pub fn camera(&self) -> std::ops::Range<usize> {
        let s = 3 * self.num_joints + self.num_shape;
        s..s + 3
    }

    pub fn pack(&self, pose: &PoseState, camera: &WeakPerspectiveCamera) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for j in 0..self.num_joints {
            x.extend(pose.local(j).iter());
        }
        x.extend(&pose.shape);
        x.extend([camera.scale, camera.translation.x, camera.translation.y]);
        x
    }

    /// Writes `x` into `pose` (expression untouched) and returns the camera.
    pub fn unpack(&self, x: &[f64], pose: &mut PoseState) -> WeakPerspectiveCamera {
        for j in 0..self.num_joints {
            let r = self.rotation(j);
            pose.set_local(j, Vec3::new(x[r.start], x[r.start + 1], x[r.start + 2]));
        }
        pose.shape.copy_from_slice(&x[self.shape()]);
        let c = self.camera();
        WeakPerspectiveCamera {
            scale: x[c.start],
            translation: Vec2::new(x[c.start + 1], x[c.start + 2]),
        }
    }

    /// Indices of the rotation parameters of `joints`.
    pub fn rotation_indices(&self, joints: impl IntoIterator<Item = usize>) -> Vec<usize> {
        joints.into_iter().flat_map(|j| self.rotation(j)).collect()
    }
}

/// Weighted fitting objective over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    template: &'a ModelTemplate,
    layout: ParamLayout,
    expression: Vec<f64>,
    keypoints: Option<Vec<Keypoint>>,
    hands: Vec<HandTarget>,
    anchor: Option<(Vec<usize>, Vec<Vec3>)>,
    weights: TermWeights,
}

impl<'a> Objective<'a> {
    pub fn new(template: &'a ModelTemplate, expression: Vec<f64>, weights: TermWeights) -> Self {
        Self {
            template,
            layout: ParamLayout::of(template),
            expression,
            keypoints: None,
            hands: Vec::new(),
            anchor: None,
            weights,
        }
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn with_keypoints(mut self, keypoints: Vec<Keypoint>) -> Result<Self> {
        if keypoints.len() != self.template.num_regressed() {
            return Err(Error::dims(format!(
                "{} keypoints for {} regressed joints",
                keypoints.len(),
                self.template.num_regressed()
            )));
        }
        self.keypoints = Some(keypoints);
        Ok(self)
    }

    pub fn with_hand(mut self, target: HandTarget) -> Self {
        self.hands.push(target);
        self
    }

    /// Anchors regressed joints `rows` at `locations`.
    pub fn with_anchor(mut self, rows: Vec<usize>, locations: Vec<Vec3>) -> Result<Self> {
        if rows.len() != locations.len() || rows.iter().any(|&r| r >= self.template.num_regressed()) {
            return Err(Error::dims("anchor rows and locations disagree with the template"));
        }
        self.anchor = Some((rows, locations));
        Ok(self)
    }

    pub fn set_weights(&mut self, weights: TermWeights) {
        self.weights = weights;
    }

    fn pose_of(&self, x: &[f64]) -> (PoseState, WeakPerspectiveCamera) {
        let mut pose = PoseState::zeros(self.template);
        pose.expression.clone_from(&self.expression);
        let cam = self.layout.unpack(x, &mut pose);
        (pose, cam)
    }

    /// Unweighted terms plus the weighted total. Infeasible cameras give an
    /// infinite total.
    pub fn terms(&self, x: &[f64]) -> Result<CostTerms> {
        let (pose, cam) = self.pose_of(x);
        let posed = pose_full(self.template, &pose)?;
        Ok(self.terms_of(&pose, &cam, &posed.vertices, &posed.joints3d))
    }

    fn terms_of(&self, pose: &PoseState, cam: &WeakPerspectiveCamera, verts: &[Vec3], joints: &[Vec3]) -> CostTerms {
        let w = &self.weights;
        let f2d = self.keypoints.as_ref().map_or(0.0, |k| reprojection(cam, joints, k));
        let fmesh = self.hands.iter().map(|h| h.cost(verts, joints)).sum();
        let fpri = cost_prior(&pose.shape);
        let f3d = self.anchor.as_ref().map_or(0.0, |(rows, loc)| {
            rows.iter().zip(loc).map(|(&r, a)| (joints[r] - a).norm_squared()).sum()
        });
        let mut total = w.w2d * f2d + w.wmesh * fmesh + w.wpri * fpri + w.w3d * f3d;
        if !(cam.scale > 0.0) {
            total = f64::INFINITY;
        }
        CostTerms {
            f2d,
            fmesh,
            fpri,
            f3d,
            total,
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.terms(x)?.total)
    }

    /// Central-difference gradient over `free` coordinates (others zero).
    pub fn numeric_gradient(&self, x: &[f64], free: &[usize], h: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for &i in free {
            xp[i] = x[i] + h;
            let fp = self.value(&xp)?;
            xp[i] = x[i] - h;
            let fm = self.value(&xp)?;
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }

    /// Cost terms and analytic gradient of the total.
    pub fn gradient(&self, x: &[f64]) -> Result<(CostTerms, Vec<f64>)> {
        self.gradient_masked(x, true)
    }

    fn gradient_masked(&self, x: &[f64], want_shape: bool) -> Result<(CostTerms, Vec<f64>)> {
        let t = self.template;
        let (pose, cam) = self.pose_of(x);
        let posed = pose_full(t, &pose)?;
        let terms = self.terms_of(&pose, &cam, &posed.vertices, &posed.joints3d);
        let w = &self.weights;
        let layout = self.layout;
        let mut grad = vec![0.0; layout.len()];

        // d total / d regressed joints and camera
        let mut g_joint = vec![Vec3::zeros(); t.num_regressed()];
        let cam_idx = layout.camera();
        if let Some(kps) = &self.keypoints {
            for (r, k) in kps.iter().enumerate() {
                if k[2] <= 0.0 {
                    continue;
                }
                let j = posed.joints3d[r];
                let e = cam.project_point(&j) - Vec2::new(k[0], k[1]);
                let c = 2.0 * w.w2d * k[2];
                g_joint[r] += c * cam.scale * Vec3::new(e.x, e.y, 0.0);
                grad[cam_idx.start] += c * (e.x * j.x + e.y * j.y);
                grad[cam_idx.start + 1] += c * e.x;
                grad[cam_idx.start + 2] += c * e.y;
            }
        }
        if let Some((rows, loc)) = &self.anchor {
            for (&r, a) in rows.iter().zip(loc) {
                g_joint[r] += 2.0 * w.w3d * (posed.joints3d[r] - a);
            }
        }
        // d total / d posed vertices
        let mut g_vert = vec![Vec3::zeros(); t.num_vertices()];
        for hand in &self.hands {
            let wr = hand.wrist_row();
            let wrist = posed.joints3d[wr];
            for (&v, rel) in hand.submodel.vertex_ids().iter().zip(&hand.relative) {
                let d = 2.0 * w.wmesh * (posed.vertices[v] - wrist - rel);
                g_vert[v] += d;
                g_joint[wr] -= d;
            }
        }
        for (row, g) in t.regressor().iter().zip(&g_joint) {
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            for &(v, wt) in row {
                g_vert[v] += wt * g;
            }
        }

        // per-joint accumulators over skinned vertices
        let nj = t.num_joints();
        let mut s_acc = vec![Vec3::zeros(); nj];
        let mut m_acc = vec![Vec3::zeros(); nj];
        let mut a_vert = vec![Vec3::zeros(); t.num_vertices()];
        for (i, row) in t.skinning().iter().enumerate() {
            let g = g_vert[i];
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            let rest = posed.shaped[i];
            for &(j, wt) in row {
                let tf = &posed.transforms[j];
                let x = tf.rotation * (rest - posed.rest_joints[j]) + tf.translation;
                s_acc[j] += wt * x.cross(&g);
                m_acc[j] += wt * g;
                a_vert[i] += wt * (tf.rotation.transpose() * g);
            }
        }
        let joint_m = m_acc.clone();

        // subtree sums, children after parents
        let tree = t.tree();
        for j in (1..nj).rev() {
            let p = tree.parent(j).unwrap();
            let (s, m) = (s_acc[j], m_acc[j]);
            s_acc[p] += s;
            m_acc[p] += m;
        }
        for k in 0..nj {
            let pk = posed.transforms[k].translation;
            let torque = s_acc[k] - pk.cross(&m_acc[k]);
            let parent_rot = match tree.parent(k) {
                Some(p) => posed.transforms[p].rotation,
                None => Mat3::identity(),
            };
            let jac = parent_rot * left_jacobian(&pose.local(k));
            let gk = jac.transpose() * torque;
            let r = layout.rotation(k);
            grad[r.start..r.end].copy_from_slice(gk.as_slice());
        }

        if want_shape {
            let kin_rows = &t.regressor()[..nj];
            let shape_idx = layout.shape();
            for (b, comp) in t.shape_basis().iter().enumerate() {
                let mut gb: f64 = a_vert.iter().zip(comp).map(|(a, s)| a.dot(s)).sum();
                let d_rest: Vec<Vec3> = kin_rows
                    .iter()
                    .map(|row| row.iter().fold(Vec3::zeros(), |acc, &(v, wt)| acc + wt * comp[v]))
                    .collect();
                let mut d_pos = vec![Vec3::zeros(); nj];
                for j in 0..nj {
                    d_pos[j] = match tree.parent(j) {
                        None => d_rest[0],
                        Some(p) => d_pos[p] + posed.transforms[p].rotation * (d_rest[j] - d_rest[p]),
                    };
                    let tf = &posed.transforms[j];
                    gb += joint_m[j].dot(&d_pos[j]) - (tf.rotation.transpose() * joint_m[j]).dot(&d_rest[j]);
                }
                gb += 2.0 * w.wpri * pose.shape[b];
                grad[shape_idx.start + b] = gb;
            }
        }
        Ok((terms, grad))
    }

    fn evaluate(&self, x: &[f64], free: &[usize], cfg: &FitConfig, want_shape: bool) -> Result<(f64, Vec<f64>)> {
        match cfg.gradient {
            GradientMode::Analytic => {
                let (terms, g) = self.gradient_masked(x, want_shape)?;
                Ok((terms.total, g))
            }
            GradientMode::CentralDifference => Ok((self.value(x)?, self.numeric_gradient(x, free, cfg.fd_step)?)),
        }
    }
}

/// Outcome of one descent run.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimized {
    pub x: Vec<f64>,
    pub costs: Vec<f64>,
    pub iterations: usize,
}

/// L-BFGS with Armijo backtracking over the `free` coordinates of `x0`.
pub fn minimize(
    objective: &Objective,
    x0: &[f64],
    free: &[usize],
    max_iters: usize,
    cfg: &FitConfig,
    stage: &'static str,
) -> Result<Minimized> {
    let layout = objective.layout();
    let shape = layout.shape();
    let want_shape = free.iter().any(|i| shape.contains(i));
    let mut x = x0.to_vec();
    let (mut f, g_full) = objective.evaluate(&x, free, cfg, want_shape)?;
    if !f.is_finite() {
        return Err(Error::NonFinite { stage });
    }
    let gather = |g: &[f64]| free.iter().map(|&i| g[i]).collect::<Vec<f64>>();
    let mut g = gather(&g_full);
    let mut costs = vec![f];
    let mut history: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut iterations = 0;

    while iterations < max_iters {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { stage });
        }
        let gnorm = dot(&g, &g).sqrt();
        if f == 0.0 || gnorm <= 1e-14 * f.max(1.0) {
            break;
        }
        iterations += 1;

        // two-loop recursion
        let mut d: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        let mut step = 1.0;
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            step = cfg.step_size / gnorm;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
            step = cfg.step_size / gnorm;
        }

        if let Some(max) = cfg.max_step {
            let len = step * dot(&d, &d).sqrt();
            if len > max {
                step *= max / len;
            }
        }
        let mut accepted = None;
        let mut trial = x.clone();
        for _ in 0..60 {
            for (k, &i) in free.iter().enumerate() {
                trial[i] = x[i] + step * d[k];
            }
            let ft = objective.value(&trial)?;
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                accepted = Some(ft);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else { break };
        let (_, g_full) = objective.evaluate(&trial, free, cfg, want_shape)?;
        let g_new = gather(&g_full);
        let s: Vec<f64> = free.iter().map(|&i| trial[i] - x[i]).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > cfg.history {
                history.pop_front();
            }
        }
        let decrease = f - f_new;
        x = trial;
        f = f_new;
        g = g_new;
        costs.push(f);
        if decrease <= cfg.convergence_tol * f.abs().max(1e-300) {
            break;
        }
    }
    Ok(Minimized { x, costs, iterations })
}

/// Observations the whole-body fit is driven by.
#[derive(Debug, Clone, Default)]
pub struct FitEvidence<'a> {
    /// One per regressed whole-body joint.
    pub keypoints2d: Option<&'a [Keypoint]>,
    pub left_hand: Option<&'a PartEstimate>,
    pub right_hand: Option<&'a PartEstimate>,
}

/// Two-stage whole-body fit starting from `init`.
pub fn fit_whole_body(
    init: &WholeBodyResult,
    evidence: &FitEvidence,
    template: &ModelTemplate,
    cfg: &FitConfig,
) -> Result<(WholeBodyResult, FitReport)> {
    cfg.validate()?;
    init.pose.check_dims(template)?;
    let start = Instant::now();
    let has_keypoints = evidence
        .keypoints2d
        .is_some_and(|k| k.iter().any(|k| k[2] > 0.0));
    let hand_ests: Vec<&PartEstimate> = [evidence.left_hand, evidence.right_hand]
        .into_iter()
        .flatten()
        .collect();
    if !has_keypoints && hand_ests.is_empty() {
        return Err(Error::NoEvidence);
    }

    let w = cfg.term_weights;
    let mut objective = Objective::new(template, init.pose.expression.clone(), w);
    if let Some(k) = evidence.keypoints2d {
        objective = objective.with_keypoints(k.to_vec())?;
    }
    let layout = objective.layout();
    let tree = template.tree();
    let mut x = layout.pack(&init.pose, &init.camera);
    let mut stages = Vec::new();

    if has_keypoints {
        let mut free = layout.rotation_indices(std::iter::once(0).chain(tree.joints_tagged(PartTag::Body)));
        free.extend(layout.shape());
        free.extend(layout.camera());
        let mut stage1 = objective.clone();
        stage1.set_weights(TermWeights { wmesh: 0.0, w3d: 0.0, ..w });
        let m = minimize(&stage1, &x, &free, cfg.stage1_iters, cfg, "stage 1")?;
        x = m.x;
        stages.push(StageReport {
            name: "stage1".into(),
            costs: m.costs,
            iterations: m.iterations,
        });
    }

    for est in &hand_ests {
        est.validate(template)?;
        objective = objective.with_hand(HandTarget::new(template, est)?);
    }
    let (pose1, _) = objective.pose_of(&x);
    let joints1 = pose_full(template, &pose1)?.joints3d;
    let rows: Vec<usize> = (0..template.num_regressed())
        .filter(|&r| template.regressed_tag(r) == PartTag::Body)
        .collect();
    let anchor = rows.iter().map(|&r| joints1[r]).collect();
    objective = objective.with_anchor(rows, anchor)?;
    let free: Vec<usize> = (0..layout.len()).collect();
    let m = minimize(&objective, &x, &free, cfg.stage2_iters, cfg, "stage 2")?;
    x = m.x;
    stages.push(StageReport {
        name: "stage2".into(),
        costs: m.costs,
        iterations: m.iterations,
    });

    let final_terms = objective.terms(&x)?;
    let (pose, camera) = objective.pose_of(&x);
    let result = WholeBodyResult {
        pose: pose.canonicalized(),
        camera,
        provenance: init.provenance.clone(),
    };
    let report = FitReport {
        stages,
        final_terms,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((result, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::Provenance;
    use crate::model::pose_model;
    use crate::toy::{make_toy_model, ToyConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelTemplate {
        make_toy_model(&ToyConfig::default(), 17).unwrap()
    }

    fn cam() -> WeakPerspectiveCamera {
        WeakPerspectiveCamera::new(110.0, Vec2::new(112.0, 200.0)).unwrap()
    }

    fn rand_aa(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * s
    }

    fn random_pose(t: &ModelTemplate, rng: &mut ChaCha8Rng, s: f64) -> PoseState {
        let mut p = PoseState::zeros(t);
        p.global_orient = rand_aa(rng, s);
        for r in &mut p.joint_rotations {
            *r = rand_aa(rng, s);
        }
        for b in &mut p.shape {
            *b = rng.random_range(-1.0..1.0);
        }
        p
    }

    fn keypoints_of(t: &ModelTemplate, pose: &PoseState, cam: &WeakPerspectiveCamera) -> Vec<Keypoint> {
        pose_model(t, pose)
            .unwrap()
            .joints3d
            .iter()
            .map(|j| {
                let q = cam.project_point(j);
                [q.x, q.y, 1.0]
            })
            .collect()
    }

    fn hand_est(t: &ModelTemplate, side: Side, rng: &mut ChaCha8Rng) -> PartEstimate {
        PartEstimate {
            part: side.hand_tag(),
            global_orient: rand_aa(rng, 1.0),
            pose: (0..6).map(|_| rand_aa(rng, 0.4)).collect(),
            shape: (0..t.num_shape()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            camera: cam(),
            keypoints2d: None,
            expression: None,
        }
    }

    #[test]
    fn cost_2d_cases() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = random_pose(&t, &mut rng, 0.5);
        let mut kps = keypoints_of(&t, &pose, &cam());
        assert!(cost_2d(&t, &pose, &cam(), &kps).unwrap() < 1e-18);
        kps[3][0] += 3.0;
        kps[3][1] += 4.0;
        assert!((cost_2d(&t, &pose, &cam(), &kps).unwrap() - 25.0).abs() < 1e-9);
        kps[5][0] += 100.0;
        kps[5][2] = 0.0;
        assert!((cost_2d(&t, &pose, &cam(), &kps).unwrap() - 25.0).abs() < 1e-9);

        // direct summation oracle
        let kps: Vec<Keypoint> = (0..t.num_regressed())
            .map(|_| [rng.random_range(0.0..224.0), rng.random_range(0.0..224.0), rng.random()])
            .collect();
        let joints = pose_model(&t, &pose).unwrap().joints3d;
        let mut oracle = 0.0;
        for i in 0..joints.len() {
            let u = cam().scale * joints[i].x + cam().translation.x - kps[i][0];
            let v = cam().scale * joints[i].y + cam().translation.y - kps[i][1];
            oracle += kps[i][2] * (u * u + v * v);
        }
        assert!((cost_2d(&t, &pose, &cam(), &kps).unwrap() - oracle).abs() <= 1e-12 * oracle);
        assert!(cost_2d(&t, &pose, &cam(), &kps[1..]).is_err());
    }

    #[test]
    fn cost_mesh_cases() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let side = Side::Left;
        let hand = hand_est(&t, side, &mut rng);
        // whole body carrying the same hand pose has zero mesh cost
        let body = crate::parts::PartEstimate {
            part: PartTag::Body,
            global_orient: rand_aa(&mut rng, 0.5),
            pose: (0..11).map(|_| rand_aa(&mut rng, 0.5)).collect(),
            shape: hand.shape.clone(),
            camera: cam(),
            keypoints2d: None,
            expression: None,
        };
        let res = crate::integrate::copy_paste(&t, &body, Some(&hand), None, None, &Default::default()).unwrap();
        let mesh = pose_model(&t, &res.pose).unwrap();
        let sub = extract_hand_submodel(&t, side).unwrap();
        // the blended wrist ring also depends on the elbow, so compare only
        // against a mesh built the same way
        let c0 = cost_mesh(&mesh, &hand, &t, side).unwrap();
        let hmesh = sub.pose_estimate(&hand).unwrap();
        let wrist = mesh.joints3d[sub.regressed_ids()[0]];
        let mut brute = 0.0;
        for (k, &v) in sub.vertex_ids().iter().enumerate() {
            let aligned = hmesh.vertices[k] - hmesh.joints3d[0] + wrist;
            for c in 0..3 {
                brute += (mesh.vertices[v][c] - aligned[c]).powi(2);
            }
        }
        assert!((c0 - brute).abs() < 1e-12);

        // uniform offset of the whole-body hand vertices (wrist joint fixed)
        let mut moved = PosedMesh { vertices: mesh.vertices.clone(), joints3d: mesh.joints3d.clone(), global_transforms: mesh.global_transforms.clone() };
        let mut aligned_mesh = moved.clone();
        for (k, &v) in sub.vertex_ids().iter().enumerate() {
            aligned_mesh.vertices[v] = hmesh.vertices[k] - hmesh.joints3d[0] + wrist;
        }
        assert!(cost_mesh(&aligned_mesh, &hand, &t, side).unwrap() < 1e-20);
        let d = Vec3::new(0.01, -0.02, 0.005);
        for &v in sub.vertex_ids() {
            moved.vertices[v] = aligned_mesh.vertices[v] + d;
        }
        let n = sub.vertex_ids().len() as f64;
        assert!((cost_mesh(&moved, &hand, &t, side).unwrap() - n * d.norm_squared()).abs() < 1e-12);
        assert!(cost_mesh(&mesh, &hand, &t, Side::Right).is_err());
    }

    #[test]
    fn prior_and_anchor() {
        assert_eq!(cost_prior(&[0.0; 10]), 0.0);
        assert_eq!(cost_prior(&[3.0, 4.0, 0.0]), 25.0);
        let v = [0.3, -1.2, 2.0, 0.5];
        assert_eq!(cost_prior(&v), v.iter().map(|x| x * x).sum::<f64>());

        let j = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.0, 0.5)];
        assert_eq!(cost_3d_anchor(&j, &j).unwrap(), 0.0);
        let mut a = j.clone();
        a[1].y += 1.0;
        assert_eq!(cost_3d_anchor(&j, &a).unwrap(), 1.0);
        let b = vec![Vec3::new(0.5, 2.5, 3.0), Vec3::new(0.0, 0.0, 0.0)];
        let oracle: f64 = (0..2).map(|i| (0..3).map(|c| (j[i][c] - b[i][c]).powi(2)).sum::<f64>()).sum();
        assert!((cost_3d_anchor(&j, &b).unwrap() - oracle).abs() < 1e-15);
        assert!(cost_3d_anchor(&j, &b[..1]).is_err());
    }

    #[test]
    fn training_loss_weights() {
        let unit = TrainingLosses::combine(1.0, 1.0, 1.0, 1.0);
        assert!((unit.total - 120.1).abs() < 1e-12);
        let x = LossInputs {
            pose: vec![Vec3::new(0.1, 0.2, 0.3)],
            joints3d: vec![Vec3::new(1.0, 1.0, 1.0)],
            joints2d: vec![Vec2::new(5.0, 6.0)],
            shape: vec![0.0, 0.0],
        };
        let l = training_losses(&x, &x).unwrap();
        assert_eq!((l.theta, l.joints3d, l.joints2d, l.reg, l.total), (0.0, 0.0, 0.0, 0.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rnd = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (pp, gp, pj, gj, p2, g2, sh) = (rnd(12), rnd(12), rnd(9), rnd(9), rnd(6), rnd(6), rnd(4));
        let v3 = |v: &[f64]| v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
        let v2 = |v: &[f64]| v.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect::<Vec<_>>();
        let pred = LossInputs { pose: v3(&pp), joints3d: v3(&pj), joints2d: v2(&p2), shape: sh.clone() };
        let gt = LossInputs { pose: v3(&gp), joints3d: v3(&gj), joints2d: v2(&g2), shape: vec![9.0; 4] };
        let l = training_losses(&pred, &gt).unwrap();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let ab = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        assert!((l.theta - sq(&pp, &gp)).abs() < 1e-12);
        assert!((l.joints3d - sq(&pj, &gj)).abs() < 1e-12);
        assert!((l.joints2d - ab(&p2, &g2)).abs() < 1e-12);
        assert!((l.reg - sq(&sh, &[0.0; 4])).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let gt = random_pose(&t, &mut rng, 0.6);
            let kps = keypoints_of(&t, &gt, &cam());
            let pose = random_pose(&t, &mut rng, 0.6);
            let anchor_rows: Vec<usize> = (0..t.num_regressed()).step_by(2).collect();
            let anchor = anchor_rows.iter().map(|_| rand_aa(&mut rng, 1.0)).collect();
            let obj = Objective::new(&t, vec![0.0; 10], TermWeights { w2d: 1.0, wmesh: 50.0, wpri: 0.3, w3d: 20.0 })
                .with_keypoints(kps)
                .unwrap()
                .with_hand(HandTarget::new(&t, &hand_est(&t, Side::Left, &mut rng)).unwrap())
                .with_hand(HandTarget::new(&t, &hand_est(&t, Side::Right, &mut rng)).unwrap())
                .with_anchor(anchor_rows, anchor)
                .unwrap();
            let x = obj.layout().pack(&pose, &cam());
            let (_, g) = obj.gradient(&x).unwrap();
            let all: Vec<usize> = (0..x.len()).collect();
            let n = obj.numeric_gradient(&x, &all, 1e-5).unwrap();
            let err = g.iter().zip(&n).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / scale < 1e-4, "relative gradient error {}", err / scale);
        }
    }

    #[test]
    fn zero_residual_is_a_fixed_point() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pose = random_pose(&t, &mut rng, 0.4);
        pose.shape.iter_mut().for_each(|b| *b = 0.0);
        let kps = keypoints_of(&t, &pose, &cam());
        let init = WholeBodyResult { pose: pose.clone(), camera: cam(), provenance: vec![Provenance::Body; t.num_joints()] };
        let cfg = FitConfig::default();
        let (res, report) = fit_whole_body(&init, &FitEvidence { keypoints2d: Some(&kps), ..Default::default() }, &t, &cfg).unwrap();
        let layout = ParamLayout::of(&t);
        let (a, b) = (layout.pack(&pose, &cam()), layout.pack(&res.pose, &res.camera));
        let max = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max <= cfg.convergence_tol.max(1e-9), "{max}");
        assert!(report.final_terms.total < 1e-12);
    }

    #[test]
    fn no_evidence_is_an_error() {
        let t = toy();
        let init = WholeBodyResult { pose: PoseState::zeros(&t), camera: cam(), provenance: vec![Provenance::Body; t.num_joints()] };
        assert!(matches!(fit_whole_body(&init, &FitEvidence::default(), &t, &FitConfig::default()), Err(Error::NoEvidence)));
        let zero_conf = vec![[0.0, 0.0, 0.0]; t.num_regressed()];
        let ev = FitEvidence { keypoints2d: Some(&zero_conf), ..Default::default() };
        assert!(matches!(fit_whole_body(&init, &ev, &t, &FitConfig::default()), Err(Error::NoEvidence)));
    }

    #[test]
    fn non_finite_start_is_reported() {
        let t = toy();
        let mut init = WholeBodyResult { pose: PoseState::zeros(&t), camera: cam(), provenance: vec![Provenance::Body; t.num_joints()] };
        init.pose.shape[0] = f64::NAN;
        let kps = keypoints_of(&t, &PoseState::zeros(&t), &cam());
        let ev = FitEvidence { keypoints2d: Some(&kps), ..Default::default() };
        assert!(matches!(fit_whole_body(&init, &ev, &t, &FitConfig::default()), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn mesh_term_decreases_and_costs_are_monotone() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_pose(&t, &mut rng, 0.3);
        let mut hand = hand_est(&t, Side::Right, &mut rng);
        hand.shape.clone_from(&gt.shape);
        let mut body = PartEstimate {
            part: PartTag::Body,
            global_orient: gt.global_orient,
            pose: t.tree().joints_tagged(PartTag::Body).into_iter().map(|j| gt.local(j)).collect(),
            shape: gt.shape.clone(),
            camera: cam(),
            keypoints2d: None,
            expression: None,
        };
        let truth = crate::integrate::copy_paste(&t, &body, None, Some(&hand), None, &Default::default()).unwrap();
        let kps = keypoints_of(&t, &truth.pose, &cam());
        // a wrong body elbow leaves the pasted hand misplaced
        let (_, elbow) = t.tree().arm(Side::Right).unwrap();
        let slot = t.tree().joints_tagged(PartTag::Body).iter().position(|&j| j == elbow).unwrap();
        body.pose[slot] += Vec3::new(0.0, 0.4, 0.2);
        let init = crate::integrate::copy_paste(&t, &body, None, Some(&hand), None, &Default::default()).unwrap();
        let before = cost_mesh(&pose_model(&t, &init.pose).unwrap(), &hand, &t, Side::Right).unwrap();
        let ev = FitEvidence { keypoints2d: Some(&kps), right_hand: Some(&hand), ..Default::default() };
        let (res, report) = fit_whole_body(&init, &ev, &t, &FitConfig::default()).unwrap();
        let after = cost_mesh(&pose_model(&t, &res.pose).unwrap(), &hand, &t, Side::Right).unwrap();
        assert!(after < before, "{after} !< {before}");
        for st in &report.stages {
            assert!(st.costs.windows(2).all(|w| w[1] <= w[0]), "{}", st.name);
        }
        let w = FitConfig::default().term_weights;
        let ft = report.final_terms;
        let sum = w.w2d * ft.f2d + w.wmesh * ft.fmesh + w.wpri * ft.fpri + w.w3d * ft.f3d;
        assert!((sum - ft.total).abs() <= 1e-10 * ft.total.max(1.0));
    }

    #[test]
    fn central_difference_mode_also_descends() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_pose(&t, &mut rng, 0.3);
        let kps = keypoints_of(&t, &gt, &cam());
        let mut init_pose = gt.clone();
        for r in &mut init_pose.joint_rotations {
            *r += rand_aa(&mut rng, 0.05);
        }
        let init = WholeBodyResult { pose: init_pose.clone(), camera: cam(), provenance: vec![Provenance::Body; t.num_joints()] };
        let cfg = FitConfig { gradient: GradientMode::CentralDifference, stage1_iters: 20, stage2_iters: 5, ..Default::default() };
        let ev = FitEvidence { keypoints2d: Some(&kps), ..Default::default() };
        let (res, report) = fit_whole_body(&init, &ev, &t, &cfg).unwrap();
        let c0 = cost_2d(&t, &init_pose, &cam(), &kps).unwrap();
        let c1 = cost_2d(&t, &res.pose, &res.camera, &kps).unwrap();
        assert!(c1 < 0.1 * c0, "{c1} vs {c0}");
        assert!(report.stages[0].iterations <= 20);
    }

    fn perturbed(t: &ModelTemplate, gt: &PoseState, rng: &mut ChaCha8Rng, sigma: f64) -> PoseState {
        use rand_distr::{Distribution, Normal};
        let n = Normal::new(0.0, sigma).unwrap();
        let mut p = gt.clone();
        for j in 0..t.num_joints() {
            let d = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            p.set_local(j, gt.local(j) + d);
        }
        p
    }

    #[test]
    fn synthetic_recovery() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_pose(&t, &mut rng, 0.3);
        let kps = keypoints_of(&t, &gt, &cam());
        let init = WholeBodyResult {
            pose: perturbed(&t, &gt, &mut rng, 0.1),
            camera: cam(),
            provenance: vec![Provenance::Body; t.num_joints()],
        };
        let ev = FitEvidence { keypoints2d: Some(&kps), ..Default::default() };
        let (res, _) = fit_whole_body(&init, &ev, &t, &FitConfig::default()).unwrap();
        let c = cost_2d(&t, &res.pose, &res.camera, &kps).unwrap();
        let rmse = (c / kps.len() as f64).sqrt();
        assert!(rmse < 0.5, "rmse {rmse}");
    }

    #[test]
    fn anchor_weight_limits_body_drift() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_pose(&t, &mut rng, 0.3);
        let kps = keypoints_of(&t, &gt, &cam());
        // hand meshes with a foreign shape pull the body away from stage 1
        let left = hand_est(&t, Side::Left, &mut rng);
        let right = hand_est(&t, Side::Right, &mut rng);
        let init = WholeBodyResult { pose: gt.clone(), camera: cam(), provenance: vec![Provenance::Body; t.num_joints()] };
        let ev = FitEvidence { keypoints2d: Some(&kps), left_hand: Some(&left), right_hand: Some(&right) };
        let mut drift = Vec::new();
        for w3d in [1.0, 100.0, 10000.0] {
            let mut cfg = FitConfig::default();
            cfg.term_weights.w3d = w3d;
            let (_, report) = fit_whole_body(&init, &ev, &t, &cfg).unwrap();
            drift.push(report.final_terms.f3d);
        }
        assert!(drift.iter().all(|d| d.is_finite() && *d < 1.0), "{drift:?}");
        assert!(drift[0] > drift[1] && drift[1] > drift[2], "{drift:?}");
    }
}
