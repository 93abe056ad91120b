//! Procedural toy humanoid used for tests, demos and the bundled model file.
//!
//! Every bone is a short tube made of vertex rings. The ring at the start
//! of a bone is centred on the joint and forms its regressor row, so
//! regressed kinematic joints coincide with forward-kinematics joint
//! positions. The model is mirror-symmetric across `x = 0`; left limbs sit
//! at positive `x`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AngleLimits, ExtraJoint, KinematicTree, ModelTemplate, PartTag, PartVertexMasks, TemplateParts,
};
use crate::rotation::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub fingers_per_hand: usize,
    pub joints_per_finger: usize,
    pub ring_vertices: usize,
    pub num_shape: usize,
    pub num_expression: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            fingers_per_hand: 2,
            joints_per_finger: 3,
            ring_vertices: 4,
            num_shape: 10,
            num_expression: 10,
        }
    }
}

struct JointSpec {
    name: String,
    parent: Option<usize>,
    tag: PartTag,
    start: Vec3,
    end: Vec3,
    radius: f64,
    limits: AngleLimits,
    /// Index of the mirrored twin, for joints on the right side.
    mirror_of: Option<usize>,
    /// Vertex mask this bone's vertices belong to.
    region: PartTag,
}

fn mirror_point(p: Vec3) -> Vec3 {
    Vec3::new(-p.x, p.y, p.z)
}

fn mirror_limits(l: AngleLimits) -> AngleLimits {
    [l[0], [-l[1][1], -l[1][0]], [-l[2][1], -l[2][0]]]
}

const SYM: [[f64; 2]; 3] = [[-0.5, 0.5], [-0.5, 0.5], [-0.5, 0.5]];

fn skeleton(cfg: &ToyConfig) -> Vec<JointSpec> {
    let mut joints: Vec<JointSpec> = Vec::new();
    let idx = |joints: &[JointSpec], name: &str| joints.iter().position(|j| j.name == name);
    let push = |joints: &mut Vec<JointSpec>,
                    name: &str,
                    parent: Option<&str>,
                    tag: PartTag,
                    region: PartTag,
                    start: [f64; 3],
                    end: [f64; 3],
                    radius: f64,
                    limits: AngleLimits| {
        let parent = parent.map(|p| idx(joints, p).expect("parent declared first"));
        joints.push(JointSpec {
            name: name.to_string(),
            parent,
            tag,
            start: Vec3::from(start),
            end: Vec3::from(end),
            radius,
            limits,
            mirror_of: None,
            region,
        });
    };
    // Adds a left joint followed by its mirrored right twin.
    let pair = |joints: &mut Vec<JointSpec>,
                name: &str,
                parent: &str,
                tag: PartTag,
                region: PartTag,
                start: [f64; 3],
                end: [f64; 3],
                radius: f64,
                limits: AngleLimits| {
        for (side, mirrored) in [("left", false), ("right", true)] {
            let parent_name = if parent == "pelvis" || parent == "neck" {
                parent.to_string()
            } else {
                format!("{side}_{parent}")
            };
            let p = idx(joints, &parent_name).expect("parent declared first");
            let (s, e, l) = if mirrored {
                (
                    mirror_point(Vec3::from(start)),
                    mirror_point(Vec3::from(end)),
                    mirror_limits(limits),
                )
            } else {
                (Vec3::from(start), Vec3::from(end), limits)
            };
            let twin = mirrored.then(|| joints.len() - 1);
            joints.push(JointSpec {
                name: format!("{side}_{name}"),
                parent: Some(p),
                tag,
                start: s,
                end: e,
                radius,
                limits: l,
                mirror_of: twin,
                region,
            });
        }
    };

    use PartTag::*;
    push(&mut joints, "pelvis", None, Body, Body, [0.0, 0.95, 0.0], [0.0, 1.45, 0.0], 0.13, [[-1.0, 1.0]; 3]);
    pair(&mut joints, "hip", "pelvis", Body, Body, [0.1, 0.9, 0.0], [0.1, 0.5, 0.0], 0.065,
        [[-1.5, 0.6], [-0.6, 0.6], [-0.6, 0.6]]);
    pair(&mut joints, "knee", "hip", Body, Body, [0.1, 0.5, 0.0], [0.1, 0.05, 0.0], 0.05,
        [[0.0, 2.0], [-0.1, 0.1], [-0.1, 0.1]]);
    push(&mut joints, "neck", Some("pelvis"), Body, Face, [0.0, 1.45, 0.0], [0.0, 1.72, 0.0], 0.08, SYM);
    pair(&mut joints, "shoulder", "neck", Body, Body, [0.18, 1.42, 0.0], [0.45, 1.42, 0.0], 0.045,
        [[-0.6, 0.6], [-0.9, 0.9], [-1.2, 0.8]]);
    pair(&mut joints, "elbow", "shoulder", Body, Body, [0.45, 1.42, 0.0], [0.7, 1.42, 0.0], 0.04,
        [[-0.3, 0.3], [-2.0, 0.0], [-0.3, 0.3]]);
    pair(&mut joints, "wrist", "elbow", Body, Body, [0.7, 1.42, 0.0], [0.78, 1.42, 0.0], 0.035,
        [[-0.8, 0.8], [-0.8, 0.8], [-0.8, 0.8]]);

    // hands: all left joints, then the mirrored right ones
    let phalanx = 0.03;
    let nf = cfg.fingers_per_hand;
    for (side, mirrored) in [("left", false), ("right", true)] {
        let tag = if mirrored { RightHand } else { LeftHand };
        for f in 0..nf {
            let z = (f as f64 - (nf as f64 - 1.0) / 2.0) * 0.025;
            for k in 0..cfg.joints_per_finger {
                let start = Vec3::new(0.78 + phalanx * k as f64, 1.42, z);
                let end = start + Vec3::new(phalanx, 0.0, 0.0);
                let parent = if k == 0 {
                    format!("{side}_wrist")
                } else {
                    format!("{side}_finger{f}_{}", k - 1)
                };
                let p = idx(&joints, &parent).unwrap();
                let limits: AngleLimits = [[-0.2, 0.2], [-0.3, 0.3], [-1.5, 0.2]];
                let name = format!("{side}_finger{f}_{k}");
                let (start, end, limits, twin) = if mirrored {
                    let twin = idx(&joints, &name.replacen("right", "left", 1));
                    (mirror_point(start), mirror_point(end), mirror_limits(limits), twin)
                } else {
                    (start, end, limits, None)
                };
                joints.push(JointSpec {
                    name,
                    parent: Some(p),
                    tag,
                    start,
                    end,
                    radius: 0.008,
                    limits,
                    mirror_of: twin,
                    region: tag,
                });
            }
        }
    }
    push(&mut joints, "jaw", Some("neck"), Face, Face, [0.0, 1.55, 0.03], [0.0, 1.5, 0.1], 0.03,
        [[0.0, 0.5], [-0.1, 0.1], [-0.1, 0.1]]);
    joints
}

/// Linear displacement field that commutes with the `x = 0` reflection.
fn symmetric_linear(rng: &mut ChaCha8Rng, sigma: f64) -> nalgebra::Matrix3<f64> {
    let n = Normal::new(0.0, sigma).unwrap();
    let mut s = || n.sample(rng);
    nalgebra::Matrix3::new(s(), 0.0, 0.0, 0.0, s(), s(), 0.0, s(), s())
}

/// Generates the toy humanoid. Deterministic for a given seed.
pub fn make_toy_model(cfg: &ToyConfig, seed: u64) -> Result<ModelTemplate> {
    if cfg.fingers_per_hand == 0 || cfg.joints_per_finger == 0 || cfg.ring_vertices < 3 {
        return Err(Error::InvalidInput(
            "toy model needs at least one finger joint per hand and three vertices per ring".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = skeleton(cfg);
    let nj = specs.len();
    let has_children: Vec<bool> = (0..nj)
        .map(|j| specs.iter().any(|s| s.parent == Some(j)))
        .collect();

    // per-joint jitter, shared by mirrored twins
    let mut phase = vec![0.0; nj];
    let mut radius_scale = vec![1.0; nj];
    for j in 0..nj {
        match specs[j].mirror_of {
            Some(t) => {
                phase[j] = phase[t];
                radius_scale[j] = radius_scale[t];
            }
            None => {
                phase[j] = rng.random_range(0.0..std::f64::consts::TAU);
                radius_scale[j] = rng.random_range(0.9..1.1);
            }
        }
    }

    let n = cfg.ring_vertices;
    let mut rest = Vec::new();
    let mut ring_offsets = Vec::new();
    let mut owner = Vec::new();
    let mut skinning = Vec::new();
    let mut regressor = vec![Vec::new(); nj];
    let mut extra_joints = Vec::new();
    let mut extra_rows = Vec::new();
    let mut masks = PartVertexMasks::default();

    for (j, spec) in specs.iter().enumerate() {
        let axis = (spec.end - spec.start).normalize();
        let helper = if axis.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let mut u = axis.cross(&helper).normalize();
        let mut v = axis.cross(&u);
        if let Some(t) = spec.mirror_of {
            // keep ring vertices exact mirror images of the twin's
            let twin = &specs[t];
            let taxis = (twin.end - twin.start).normalize();
            let thelper = if taxis.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
            let tu = taxis.cross(&thelper).normalize();
            u = mirror_point(tu);
            v = mirror_point(taxis.cross(&tu));
        }
        let mut ts = vec![0.0, 1.0 / 3.0, 2.0 / 3.0];
        if !has_children[j] {
            ts.push(1.0);
        }
        for &t in &ts {
            let center = spec.start + t * (spec.end - spec.start);
            let first = rest.len();
            for k in 0..n {
                let a = phase[j] + std::f64::consts::TAU * k as f64 / n as f64;
                let offset = spec.radius * radius_scale[j] * (a.cos() * u + a.sin() * v);
                rest.push(center + offset);
                ring_offsets.push(offset);
                owner.push(j);
                let weights = match spec.parent {
                    Some(p) if t < 0.5 => vec![(p, 0.5 - t), (j, 0.5 + t)],
                    _ => vec![(j, 1.0)],
                };
                skinning.push(weights);
                let region = match spec.region {
                    PartTag::Body => &mut masks.body,
                    PartTag::LeftHand => &mut masks.left_hand,
                    PartTag::RightHand => &mut masks.right_hand,
                    PartTag::Face => &mut masks.face,
                };
                region.push(first + k);
            }
            let ring: Vec<(usize, f64)> = (first..first + n).map(|i| (i, 1.0 / n as f64)).collect();
            if t == 0.0 {
                regressor[j] = ring;
            } else if t == 1.0 && spec.tag != PartTag::Body {
                extra_joints.push(ExtraJoint {
                    name: format!("{}_tip", spec.name),
                    attach: j,
                });
                extra_rows.push(ring);
            }
        }
    }
    // wrists belong to the hand region for per-part evaluation
    for side in ["left", "right"] {
        let w = specs.iter().position(|s| s.name == format!("{side}_wrist")).unwrap();
        let mask = if side == "left" { &mut masks.left_hand } else { &mut masks.right_hand };
        let moved: Vec<usize> = masks.body.iter().copied().filter(|&i| owner[i] == w).collect();
        masks.body.retain(|i| owner[*i] != w);
        mask.extend(moved);
        mask.sort_unstable();
    }
    regressor.extend(extra_rows);

    let center = Vec3::new(0.0, 0.95, 0.0);
    let mut basis = |count: usize, linear_sigma: f64, radial_sigma: f64, only: Option<PartTag>| {
        let radial = Normal::new(0.0, radial_sigma).unwrap();
        (0..count)
            .map(|_| {
                let a = symmetric_linear(&mut rng, linear_sigma);
                let mut rho = vec![0.0; nj];
                for j in 0..nj {
                    rho[j] = match specs[j].mirror_of {
                        Some(t) => rho[t],
                        None => radial.sample(&mut rng),
                    };
                }
                rest.iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let j = owner[i];
                        if only.is_some_and(|tag| specs[j].region != tag) {
                            return Vec3::zeros();
                        }
                        a * (x - center) + rho[j] * ring_offsets[i]
                    })
                    .collect::<Vec<Vec3>>()
            })
            .collect::<Vec<_>>()
    };
    let shape_basis = basis(cfg.num_shape, 0.03, 0.1, None);
    let expression_basis = basis(cfg.num_expression, 0.02, 0.1, Some(PartTag::Face));

    let tree = KinematicTree::new(
        specs.iter().map(|s| s.parent).collect(),
        specs.iter().map(|s| s.name.clone()).collect(),
        specs.iter().map(|s| s.tag).collect(),
    )?;
    ModelTemplate::new(TemplateParts {
        rest_vertices: rest,
        shape_basis,
        expression_basis,
        skinning,
        regressor,
        tree,
        extra_joints,
        angle_limits: specs.iter().map(|s| s.limits).collect(),
        part_vertices: masks,
    })
}
