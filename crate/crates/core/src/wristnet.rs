//! Wrist-integration network.
//!
//! A small MLP that takes the current arm pose and the normalized 2D
//! displacement between the body module's wrist and the hand module's wrist,
//! and returns an arm pose that moves the wrist onto the hand. Shoulders are
//! encoded as global orientations so the net does not depend on the rest of
//! the body's pose. Nets operate in right-arm space; left arms are mirrored
//! in and out.
//!
//! Training targets come from an arm-only fit of the 2D wrist reprojection
//! on synthetic poses.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Vec2, WeakPerspectiveCamera};
use crate::error::{Error, Result};
use crate::fit::{minimize, FitConfig, Objective, ParamLayout, TermWeights};
use crate::integrate::{global_from_local, local_from_global, WholeBodyResult};
use crate::model::{pose_full, ModelTemplate, PartTag, PoseState, Side};
use crate::parts::{extract_hand_submodel, PartEstimate};
use crate::rotation::{mirror, rodrigues, rodrigues_inverse, Vec3};

/// Layer widths, input first.
pub const LAYER_DIMS: [usize; 7] = [8, 128, 256, 512, 256, 128, 6];

/// Absolute slack, in squared pixels, on the required cost reduction.
pub const REDUCTION_SLACK: f64 = 1e-12;

/// Arm lengths (projected) below this are degenerate.
pub const MIN_ARM_LENGTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WristNet {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Σ (d_in·d_out + d_out) over the layers.
pub fn expected_param_count() -> usize {
    LAYER_DIMS.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl WristNet {
    /// He-initialized weights, zero biases.
    pub fn new(seed: u64, activation: Activation) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = LAYER_DIMS
            .windows(2)
            .map(|w| {
                let n = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).unwrap();
                Layer {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| n.sample(&mut rng)),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(activation: Activation) -> Self {
        let layers = LAYER_DIMS
            .windows(2)
            .map(|w| Layer {
                weights: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.len() != LAYER_DIMS.len() - 1 {
            return Err(Error::dims(format!(
                "{} layers, expected {}",
                layers.len(),
                LAYER_DIMS.len() - 1
            )));
        }
        for (i, (l, w)) in layers.iter().zip(LAYER_DIMS.windows(2)).enumerate() {
            if l.weights.shape() != (w[1], w[0]) || l.bias.len() != w[1] {
                return Err(Error::dims(format!(
                    "layer {i} is {}x{} with {} biases, expected {}x{}",
                    l.weights.nrows(),
                    l.weights.ncols(),
                    l.bias.len(),
                    w[1],
                    w[0]
                )));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("layer {i} has non-finite weights")));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Raw evaluation on one 8-vector.
    pub fn eval(&self, input: &[f64; 8]) -> [f64; 6] {
        let mut x = DVector::from_column_slice(input);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = &l.weights * x + &l.bias;
            if i < last {
                x.apply(|v| *v = self.activation.apply(*v));
            }
        }
        let mut out = [0.0; 6];
        out.copy_from_slice(x.as_slice());
        out
    }

    /// Column-batched forward pass keeping every layer's output.
    fn forward_batch(&self, input: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = &l.weights * acts.last().unwrap();
            for mut col in y.column_iter_mut() {
                col += &l.bias;
            }
            if i < last {
                y.apply(|v| *v = self.activation.apply(*v));
            }
            acts.push(y);
        }
        acts
    }
}

/// Arm pose with the shoulder in global orientation and the elbow local.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmPoseEncoding {
    pub shoulder_global: Vec3,
    pub elbow_local: Vec3,
}

impl ArmPoseEncoding {
    pub fn to_array(&self) -> [f64; 6] {
        let (s, e) = (self.shoulder_global, self.elbow_local);
        [s.x, s.y, s.z, e.x, e.y, e.z]
    }

    pub fn from_array(a: &[f64; 6]) -> Self {
        Self {
            shoulder_global: Vec3::new(a[0], a[1], a[2]),
            elbow_local: Vec3::new(a[3], a[4], a[5]),
        }
    }

    pub fn mirrored(&self) -> Self {
        Self {
            shoulder_global: mirror(&self.shoulder_global),
            elbow_local: mirror(&self.elbow_local),
        }
    }
}

pub fn encode_arm(template: &ModelTemplate, pose: &PoseState, side: Side) -> Result<ArmPoseEncoding> {
    let (shoulder, elbow) = template.tree().arm(side)?;
    Ok(ArmPoseEncoding {
        shoulder_global: rodrigues_inverse(&global_from_local(template, pose, shoulder)?)?,
        elbow_local: pose.local(elbow),
    })
}

pub fn decode_arm(
    template: &ModelTemplate,
    pose: &PoseState,
    enc: &ArmPoseEncoding,
    side: Side,
) -> Result<PoseState> {
    let (shoulder, elbow) = template.tree().arm(side)?;
    let mut out = pose.clone();
    out.set_local(
        shoulder,
        local_from_global(template, pose, shoulder, &rodrigues(&enc.shoulder_global))?,
    );
    out.set_local(elbow, enc.elbow_local);
    Ok(out)
}

/// `(hand − body) / arm_length`.
pub fn direction_vector(body_wrist2d: &Vec2, hand_wrist2d: &Vec2, projected_arm_length: f64) -> Result<Vec2> {
    if !(projected_arm_length >= MIN_ARM_LENGTH) {
        return Err(Error::DegenerateArm {
            length: projected_arm_length,
        });
    }
    Ok((hand_wrist2d - body_wrist2d) / projected_arm_length)
}

/// Upper arm plus forearm length of the shaped rest skeleton.
pub fn arm_length(template: &ModelTemplate, pose: &PoseState, side: Side) -> Result<f64> {
    let (shoulder, elbow) = template.tree().arm(side)?;
    let wrist = template.tree().wrist(side)?;
    let rest = pose_full(template, &PoseState { shape: pose.shape.clone(), ..PoseState::zeros(template) })?.rest_joints;
    Ok((rest[elbow] - rest[shoulder]).norm() + (rest[wrist] - rest[elbow]).norm())
}

/// Evaluates the net on an arm of either side.
pub fn forward(net: &WristNet, enc: &ArmPoseEncoding, d: &Vec2, side: Side) -> ArmPoseEncoding {
    let run = |e: &ArmPoseEncoding, d: &Vec2| {
        let a = e.to_array();
        let input = [a[0], a[1], a[2], a[3], a[4], a[5], d.x, d.y];
        ArmPoseEncoding::from_array(&net.eval(&input))
    };
    match side {
        Side::Right => run(enc, d),
        Side::Left => run(&enc.mirrored(), &Vec2::new(-d.x, d.y)).mirrored(),
    }
}

/// Image position of the regressed whole-body wrist joint.
pub fn wrist_2d(template: &ModelTemplate, pose: &PoseState, camera: &WeakPerspectiveCamera, side: Side) -> Result<Vec2> {
    let wrist = template.tree().wrist(side)?;
    Ok(camera.project_point(&pose_full(template, pose)?.joints3d[wrist]))
}

/// Image position of the hand module's wrist: its first keypoint when
/// present, otherwise the projected hand-model wrist.
pub fn hand_wrist_2d(template: &ModelTemplate, hand: &PartEstimate) -> Result<Vec2> {
    if let Some(k) = hand.keypoint(0) {
        return Ok(k);
    }
    let side = match hand.part {
        PartTag::LeftHand => Side::Left,
        PartTag::RightHand => Side::Right,
        other => return Err(Error::InvalidInput(format!("{other:?} estimate is not a hand"))),
    };
    let sub = extract_hand_submodel(template, side)?;
    let mesh = sub.pose_estimate(hand)?;
    Ok(hand.camera.project_point(&mesh.joints3d[0]))
}

/// Fits shoulder and elbow so the projected wrist reaches `target`.
pub fn fit_arm(
    template: &ModelTemplate,
    pose: &PoseState,
    camera: &WeakPerspectiveCamera,
    side: Side,
    target: &Vec2,
    cfg: &FitConfig,
) -> Result<PoseState> {
    let (shoulder, elbow) = template.tree().arm(side)?;
    let wrist = template.tree().wrist(side)?;
    let mut kps = vec![[0.0; 3]; template.num_regressed()];
    kps[wrist] = [target.x, target.y, 1.0];
    let weights = TermWeights {
        w2d: 1.0,
        wmesh: 0.0,
        wpri: 0.0,
        w3d: 0.0,
    };
    let objective = Objective::new(template, pose.expression.clone(), weights).with_keypoints(kps)?;
    let layout = ParamLayout::of(template);
    let free = layout.rotation_indices([shoulder, elbow]);
    let m = minimize(&objective, &layout.pack(pose, camera), &free, cfg.stage1_iters, cfg, "arm fit")?;
    let mut out = pose.clone();
    layout.unpack(&m.x, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Largest normalized wrist displacement drawn.
    pub max_displacement: f64,
    pub shape_sigma: f64,
    /// Largest per-axis global orientation drawn, radians.
    pub max_global: f64,
    pub scale_range: [f64; 2],
    /// Required relative drop of the displaced-wrist cost.
    pub min_reduction: f64,
    pub fit: FitConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            max_displacement: 0.4,
            shape_sigma: 0.5,
            max_global: 0.3,
            scale_range: [80.0, 160.0],
            min_reduction: 0.9,
            fit: FitConfig {
                stage1_iters: 100,
                step_size: 0.05,
                convergence_tol: 1e-10,
                max_step: Some(0.1),
                ..FitConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WristTrainSample {
    pub side: Side,
    /// Whole-body pose before adjustment.
    pub pose: PoseState,
    pub camera: WeakPerspectiveCamera,
    pub input: ArmPoseEncoding,
    pub d: Vec2,
    pub target: ArmPoseEncoding,
    /// Image position the wrist is displaced to.
    pub target_wrist2d: Vec2,
}

impl WristTrainSample {
    /// Net input in right-arm space.
    fn net_input(&self) -> [f64; 8] {
        let (enc, d) = match self.side {
            Side::Right => (self.input, self.d),
            Side::Left => (self.input.mirrored(), Vec2::new(-self.d.x, self.d.y)),
        };
        let a = enc.to_array();
        [a[0], a[1], a[2], a[3], a[4], a[5], d.x, d.y]
    }

    fn net_target(&self) -> [f64; 6] {
        match self.side {
            Side::Right => self.target.to_array(),
            Side::Left => self.target.mirrored().to_array(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthReport {
    pub attempts: usize,
    pub solver_failed: usize,
}

fn uniform_in(rng: &mut ChaCha8Rng, lim: [f64; 2]) -> f64 {
    if lim[1] > lim[0] {
        rng.random_range(lim[0]..=lim[1])
    } else {
        lim[0]
    }
}

fn synth_one(template: &ModelTemplate, seed: u64, index: u64, cfg: &SynthConfig) -> Result<Option<WristTrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let side = Side::Right;
    let (shoulder, elbow) = template.tree().arm(side)?;
    let limits = template.angle_limits();
    let mut pose = PoseState::zeros(template);
    let g = cfg.max_global;
    pose.global_orient = Vec3::new(
        rng.random_range(-g..=g),
        rng.random_range(-g..=g),
        rng.random_range(-g..=g),
    );
    for j in [shoulder, elbow] {
        let l = limits[j];
        pose.set_local(
            j,
            Vec3::new(uniform_in(&mut rng, l[0]), uniform_in(&mut rng, l[1]), uniform_in(&mut rng, l[2])),
        );
    }
    let noise = Normal::new(0.0, cfg.shape_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    for b in &mut pose.shape {
        *b = noise.sample(&mut rng);
    }
    let camera = WeakPerspectiveCamera::new(
        uniform_in(&mut rng, cfg.scale_range),
        Vec2::new(112.0, 112.0),
    )?;
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mag = rng.random_range(0.0..=cfg.max_displacement);
    let d = Vec2::new(angle.cos(), angle.sin()) * mag;

    let length = camera.scale * arm_length(template, &pose, side)?;
    let start = wrist_2d(template, &pose, &camera, side)?;
    let target_wrist2d = start + d * length;
    let fitted = fit_arm(template, &pose, &camera, side, &target_wrist2d, &cfg.fit)?;
    let before = (start - target_wrist2d).norm_squared();
    let after = (wrist_2d(template, &fitted, &camera, side)? - target_wrist2d).norm_squared();
    if after > (1.0 - cfg.min_reduction) * before + REDUCTION_SLACK {
        return Ok(None);
    }
    Ok(Some(WristTrainSample {
        side,
        input: encode_arm(template, &pose, side)?,
        target: encode_arm(template, &fitted, side)?,
        pose,
        camera,
        d,
        target_wrist2d,
    }))
}

/// Draws `n` accepted samples. Sample `i` of the attempt sequence depends
/// only on `seed` and `i`; attempts whose fit misses the required cost
/// reduction are counted and skipped.
pub fn synthesize_dataset(
    template: &ModelTemplate,
    n: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<(Vec<WristTrainSample>, SynthReport)> {
    template.tree().arm(Side::Right)?;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let mut failed = 0usize;
    while out.len() < n {
        let need = n - out.len();
        let batch = need + need / 4 + 16;
        if attempts > 20 * n + 1000 {
            return Err(Error::Degenerate(format!(
                "only {} of {n} wrist samples accepted after {attempts} attempts",
                out.len()
            )));
        }
        let results: Vec<Result<Option<WristTrainSample>>> = (attempts..attempts + batch)
            .into_par_iter()
            .map(|i| synth_one(template, seed, i as u64, cfg))
            .collect();
        for r in results {
            if out.len() == n {
                break;
            }
            attempts += 1;
            match r? {
                Some(s) => out.push(s),
                None => failed += 1,
            }
        }
    }
    Ok((
        out,
        SynthReport {
            attempts,
            solver_failed: failed,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

fn batch_matrices(samples: &[&WristTrainSample]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = samples.len();
    let mut x = DMatrix::zeros(8, n);
    let mut y = DMatrix::zeros(6, n);
    for (c, s) in samples.iter().enumerate() {
        x.column_mut(c).copy_from_slice(&s.net_input());
        y.column_mut(c).copy_from_slice(&s.net_target());
    }
    (x, y)
}

/// Mean squared error per output component.
pub fn dataset_loss(net: &WristNet, dataset: &[WristTrainSample]) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let refs: Vec<&WristTrainSample> = dataset.iter().collect();
    let (x, y) = batch_matrices(&refs);
    let out = net.forward_batch(x).pop().unwrap();
    (out - y).norm_squared() / (6 * dataset.len()) as f64
}

/// Adam on the mean squared error. Returns the net and the dataset loss
/// before training and after every epoch.
pub fn train(net: &WristNet, dataset: &[WristTrainSample], cfg: &TrainConfig) -> Result<(WristNet, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidInput("batch size and learning rate must be positive".into()));
    }
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut net = net.clone();
    let mut m: Vec<(DMatrix<f64>, DVector<f64>)> = net
        .layers
        .iter()
        .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
        .collect();
    let mut v = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = vec![dataset_loss(&net, dataset)];
    let mut step = 0i32;
    let last = net.layers.len() - 1;

    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&WristTrainSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (x, y) = batch_matrices(&refs);
            let acts = net.forward_batch(x);
            let mut delta = (acts.last().unwrap() - y) * (2.0 / (6 * chunk.len()) as f64);
            step += 1;
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            for k in (0..=last).rev() {
                let gw = &delta * acts[k].transpose();
                let gb = delta.column_sum();
                if k > 0 {
                    let mut back = net.layers[k].weights.transpose() * &delta;
                    let act = net.activation;
                    back.zip_apply(&acts[k], |d, y| *d *= act.derivative_from_output(y));
                    delta = back;
                }
                let (mw, mb) = &mut m[k];
                let (vw, vb) = &mut v[k];
                let layer = &mut net.layers[k];
                adam(&mut layer.weights, mw, vw, &gw, cfg.learning_rate, b1, b2, c1, c2, eps);
                adam(&mut layer.bias, mb, vb, &gb, cfg.learning_rate, b1, b2, c1, c2, eps);
            }
        }
        let loss = dataset_loss(&net, dataset);
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "wrist-net training" });
        }
        curve.push(loss);
    }
    Ok((net, curve))
}

#[allow(clippy::too_many_arguments)]
fn adam<R: nalgebra::Dim, C: nalgebra::Dim, S>(
    p: &mut nalgebra::Matrix<f64, R, C, S>,
    m: &mut nalgebra::Matrix<f64, R, C, S>,
    v: &mut nalgebra::Matrix<f64, R, C, S>,
    g: &nalgebra::Matrix<f64, R, C, S>,
    lr: f64,
    b1: f64,
    b2: f64,
    c1: f64,
    c2: f64,
    eps: f64,
) where
    S: nalgebra::StorageMut<f64, R, C>,
{
    for i in 0..p.len() {
        let gi = g[i];
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
}

/// Adjusts each arm that has a hand estimate so the projected wrist moves
/// toward the hand module's wrist, keeping the hand's global orientation.
pub fn apply_wristnet(
    net: &WristNet,
    wholebody: &WholeBodyResult,
    left: Option<&PartEstimate>,
    right: Option<&PartEstimate>,
    template: &ModelTemplate,
) -> Result<WholeBodyResult> {
    wholebody.pose.check_dims(template)?;
    let mut out = wholebody.clone();
    for (side, est) in [(Side::Left, left), (Side::Right, right)] {
        let Some(est) = est else { continue };
        if est.part != side.hand_tag() {
            return Err(Error::InvalidInput(format!(
                "{:?} estimate given for the {side:?} hand",
                est.part
            )));
        }
        let wrist = template.tree().wrist(side)?;
        let pose = &out.pose;
        let hand_global = global_from_local(template, pose, wrist)?;
        let body2d = wrist_2d(template, pose, &out.camera, side)?;
        let hand2d = hand_wrist_2d(template, est)?;
        let length = out.camera.scale * arm_length(template, pose, side)?;
        let d = direction_vector(&body2d, &hand2d, length)?;
        let enc = forward(net, &encode_arm(template, pose, side)?, &d, side);
        let mut adjusted = decode_arm(template, pose, &enc, side)?;
        let local = local_from_global(template, &adjusted, wrist, &hand_global)?;
        adjusted.set_local(wrist, local);
        out.pose = adjusted;
    }
    Ok(out)
}
