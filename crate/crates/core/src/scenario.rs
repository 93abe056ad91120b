//! Synthetic evaluation frames: ground-truth whole-body states and the
//! noisy part estimates a body, two hand and a face module would report
//! for them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{Vec2, WeakPerspectiveCamera};
use crate::error::{Error, Result};
use crate::io::{EstimateFrame, TruthFrame};
use crate::model::{forward_kinematics, pose_full, ModelTemplate, PartTag, PoseState, Side};
use crate::parts::{extract_hand_submodel, Keypoint, PartEstimate};
use crate::rotation::{rodrigues_inverse, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Per-component axis-angle noise on body joints, radians.
    pub body_noise: f64,
    /// Noise on shoulders and elbows, where body modules are least
    /// reliable.
    pub arm_noise: f64,
    pub hand_noise: f64,
    pub shape_sigma: f64,
    pub shape_noise: f64,
    pub keypoint_noise_px: f64,
    /// Expression coefficients the face module reports beyond the model's.
    pub extra_expression: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            body_noise: 0.05,
            arm_noise: 0.2,
            hand_noise: 0.05,
            shape_sigma: 0.5,
            shape_noise: 0.1,
            keypoint_noise_px: 1.0,
            extra_expression: 5,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).unwrap().sample(rng)
    } else {
        0.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, v: &Vec3, sigma: f64) -> Vec3 {
    v + Vec3::new(gauss(rng, sigma), gauss(rng, sigma), gauss(rng, sigma))
}

fn project_all(rng: &mut ChaCha8Rng, camera: &WeakPerspectiveCamera, points: &[Vec3], sigma: f64) -> Vec<Keypoint> {
    points
        .iter()
        .map(|p| {
            let q = camera.project_point(p) + Vec2::new(gauss(rng, sigma), gauss(rng, sigma));
            [q.x, q.y, 1.0]
        })
        .collect()
}

fn frame(template: &ModelTemplate, seed: u64, index: u64, cfg: &ScenarioConfig) -> Result<(EstimateFrame, TruthFrame)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let tree = template.tree();
    let limits = template.angle_limits();

    let mut gt = PoseState::zeros(template);
    gt.global_orient = Vec3::new(
        rng.random_range(-0.3..=0.3),
        rng.random_range(-0.3..=0.3),
        rng.random_range(-0.3..=0.3),
    );
    for (j, &l) in limits.iter().enumerate().skip(1) {
        let v = Vec3::from_fn(|a, _| {
            if l[a][1] > l[a][0] {
                rng.random_range(l[a][0]..=l[a][1])
            } else {
                l[a][0]
            }
        });
        gt.set_local(j, v);
    }
    for b in &mut gt.shape {
        *b = gauss(&mut rng, cfg.shape_sigma);
    }
    for e in &mut gt.expression {
        *e = gauss(&mut rng, cfg.shape_sigma);
    }
    let camera = WeakPerspectiveCamera::new(
        rng.random_range(100.0..=140.0),
        Vec2::new(rng.random_range(90.0..=130.0), rng.random_range(-60.0..=-20.0)),
    )?;
    let posed = pose_full(template, &gt)?;
    let fk = forward_kinematics(template, &gt)?;
    let noisy_shape = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        gt.shape.iter().map(|b| b + gauss(rng, cfg.shape_noise)).collect()
    };

    let arms: Vec<usize> = [Side::Left, Side::Right]
        .into_iter()
        .map(|s| tree.arm(s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|(s, e)| [s, e])
        .collect();
    let body_pose = tree
        .joints_tagged(PartTag::Body)
        .into_iter()
        .map(|j| {
            let sigma = if arms.contains(&j) { cfg.arm_noise } else { cfg.body_noise };
            jitter(&mut rng, &gt.local(j), sigma)
        })
        .collect();
    let body = PartEstimate {
        part: PartTag::Body,
        global_orient: jitter(&mut rng, &gt.global_orient, cfg.body_noise),
        pose: body_pose,
        shape: noisy_shape(&mut rng),
        camera,
        keypoints2d: Some(project_all(&mut rng, &camera, &posed.joints3d, cfg.keypoint_noise_px)),
        expression: None,
    };

    let mut hands = Vec::new();
    for side in [Side::Left, Side::Right] {
        let wrist = tree.wrist(side)?;
        let sub = extract_hand_submodel(template, side)?;
        let points: Vec<Vec3> = sub.regressed_ids().iter().map(|&r| posed.joints3d[r]).collect();
        let global = rodrigues_inverse(&fk[wrist].rotation)?;
        hands.push(PartEstimate {
            part: side.hand_tag(),
            global_orient: jitter(&mut rng, &global, cfg.hand_noise),
            pose: tree
                .joints_tagged(side.hand_tag())
                .into_iter()
                .map(|j| jitter(&mut rng, &gt.local(j), cfg.hand_noise))
                .collect(),
            shape: noisy_shape(&mut rng),
            camera,
            keypoints2d: Some(project_all(&mut rng, &camera, &points, cfg.keypoint_noise_px)),
            expression: None,
        });
    }
    let right = hands.pop();
    let left = hands.pop();

    let mut expression: Vec<f64> = gt.expression.iter().map(|e| e + gauss(&mut rng, cfg.shape_noise)).collect();
    expression.extend((0..cfg.extra_expression).map(|_| gauss(&mut rng, cfg.shape_sigma)));
    let face = PartEstimate {
        part: PartTag::Face,
        global_orient: Vec3::zeros(),
        pose: tree
            .joints_tagged(PartTag::Face)
            .into_iter()
            .map(|j| jitter(&mut rng, &gt.local(j), cfg.body_noise))
            .collect(),
        shape: Vec::new(),
        camera,
        keypoints2d: None,
        expression: Some(expression),
    };

    let id = format!("{index:05}");
    Ok((
        EstimateFrame {
            id: id.clone(),
            body,
            left_hand: left,
            right_hand: right,
            face: Some(face),
        },
        TruthFrame { id, pose: gt, camera },
    ))
}

/// `n` frames; frame `i` depends only on `seed` and `i`.
pub fn synthesize_frames(
    template: &ModelTemplate,
    n: usize,
    seed: u64,
    cfg: &ScenarioConfig,
) -> Result<(Vec<EstimateFrame>, Vec<TruthFrame>)> {
    if template.tree().joints_tagged(PartTag::Body).is_empty() {
        return Err(Error::MissingPart(PartTag::Body));
    }
    let mut est = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let (e, t) = frame(template, seed, i as u64, cfg)?;
        est.push(e);
        truth.push(t);
    }
    Ok((est, truth))
}
