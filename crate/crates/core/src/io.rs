//! File formats.
//!
//! Every document is JSON with a mandatory `version` field and rejects
//! unknown fields. Sparse weights are stored as `[row, column, weight]`
//! triplets; the root's parent is `-1`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::WeakPerspectiveCamera;
use crate::error::{Error, Result};
use crate::fit::FitReport;
use crate::integrate::WholeBodyResult;
use crate::model::{
    AngleLimits, ExtraJoint, KinematicTree, ModelTemplate, PartTag, PartVertexMasks, PoseState, PosedMesh,
    TemplateParts,
};
use crate::parts::PartEstimate;
use crate::rotation::Vec3;
use crate::wristnet::{Activation, Layer, SynthReport, WristNet, WristTrainSample};

pub const FORMAT_VERSION: u32 = 1;

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::InvalidInput(format!(
            "{what} has version {found}, this build reads version {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

/// Reads and parses a JSON document; nothing is returned unless the whole
/// file parses.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| Error::Parse {
        path: "<output>".into(),
        source,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCounts {
    pub vertices: usize,
    pub joints: usize,
    pub shape: usize,
    pub expression: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointRecord {
    pub name: String,
    pub parent: i64,
    pub part: PartTag,
    pub limits: AngleLimits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub counts: ModelCounts,
    pub joints: Vec<JointRecord>,
    pub extra_joints: Vec<ExtraJoint>,
    pub vertices: Vec<Vec3>,
    pub shape_basis: Vec<Vec<Vec3>>,
    pub expression_basis: Vec<Vec<Vec3>>,
    /// `[vertex, joint, weight]`.
    pub skinning: Vec<(usize, usize, f64)>,
    /// `[regressed joint, vertex, weight]`.
    pub regressor: Vec<(usize, usize, f64)>,
    pub part_vertices: PartVertexMasks,
}

impl ModelFile {
    pub fn from_template(t: &ModelTemplate) -> Self {
        let tree = t.tree();
        let joints = (0..t.num_joints())
            .map(|j| JointRecord {
                name: tree.names()[j].clone(),
                parent: tree.parent(j).map_or(-1, |p| p as i64),
                part: tree.tag(j),
                limits: t.angle_limits()[j],
            })
            .collect();
        let skinning = t
            .skinning()
            .iter()
            .enumerate()
            .flat_map(|(v, row)| row.iter().map(move |&(j, w)| (v, j, w)))
            .collect();
        let regressor = t
            .regressor()
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(v, w)| (r, v, w)))
            .collect();
        Self {
            version: FORMAT_VERSION,
            counts: ModelCounts {
                vertices: t.num_vertices(),
                joints: t.num_joints(),
                shape: t.num_shape(),
                expression: t.num_expression(),
            },
            joints,
            extra_joints: t.extra_joints().to_vec(),
            vertices: t.rest_vertices().to_vec(),
            shape_basis: t.shape_basis().to_vec(),
            expression_basis: t.expression_basis().to_vec(),
            skinning,
            regressor,
            part_vertices: t.part_vertices().clone(),
        }
    }

    pub fn into_template(self) -> Result<ModelTemplate> {
        check_version(self.version, "model file")?;
        let c = self.counts;
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if self.vertices.len() != c.vertices {
            return bad(format!("counts.vertices is {} but {} vertices are listed", c.vertices, self.vertices.len()));
        }
        if self.joints.len() != c.joints {
            return bad(format!("counts.joints is {} but {} joints are listed", c.joints, self.joints.len()));
        }
        if self.shape_basis.len() != c.shape {
            return bad(format!("counts.shape is {} but {} shape components are listed", c.shape, self.shape_basis.len()));
        }
        if self.expression_basis.len() != c.expression {
            return bad(format!(
                "counts.expression is {} but {} expression components are listed",
                c.expression,
                self.expression_basis.len()
            ));
        }
        let mut parents = Vec::with_capacity(c.joints);
        for (j, rec) in self.joints.iter().enumerate() {
            parents.push(match rec.parent {
                -1 => None,
                p if p >= 0 && (p as usize) < c.joints => Some(p as usize),
                p => return bad(format!("joint {j} ('{}') has parent {p}, expected -1 or 0..{}", rec.name, c.joints)),
            });
        }
        let tree = KinematicTree::new(
            parents,
            self.joints.iter().map(|r| r.name.clone()).collect(),
            self.joints.iter().map(|r| r.part).collect(),
        )?;

        let mut skinning = vec![Vec::new(); c.vertices];
        for (i, &(v, j, w)) in self.skinning.iter().enumerate() {
            if v >= c.vertices || j >= c.joints {
                return bad(format!("skinning triplet {i} ({v}, {j}) is out of range"));
            }
            skinning[v].push((j, w));
        }
        let rows = c.joints + self.extra_joints.len();
        let mut regressor = vec![Vec::new(); rows];
        for (i, &(r, v, w)) in self.regressor.iter().enumerate() {
            if r >= rows || v >= c.vertices {
                return bad(format!("regressor triplet {i} ({r}, {v}) is out of range"));
            }
            regressor[r].push((v, w));
        }
        ModelTemplate::new(TemplateParts {
            rest_vertices: self.vertices,
            shape_basis: self.shape_basis,
            expression_basis: self.expression_basis,
            skinning,
            regressor,
            tree,
            extra_joints: self.extra_joints,
            angle_limits: self.joints.iter().map(|r| r.limits).collect(),
            part_vertices: self.part_vertices,
        })
    }
}

pub fn load_model(path: &Path) -> Result<ModelTemplate> {
    read_json::<ModelFile>(path)?.into_template()
}

pub fn save_model(path: &Path, template: &ModelTemplate) -> Result<()> {
    write_json(path, &ModelFile::from_template(template))
}

/// Part estimates of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateFrame {
    pub id: String,
    pub body: PartEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_hand: Option<PartEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right_hand: Option<PartEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<PartEstimate>,
}

impl EstimateFrame {
    pub fn validate(&self, template: &ModelTemplate) -> Result<()> {
        let slots = [
            (Some(&self.body), PartTag::Body),
            (self.left_hand.as_ref(), PartTag::LeftHand),
            (self.right_hand.as_ref(), PartTag::RightHand),
            (self.face.as_ref(), PartTag::Face),
        ];
        for (est, tag) in slots {
            let Some(est) = est else { continue };
            if est.part != tag {
                return Err(Error::InvalidInput(format!(
                    "frame {}: {:?} estimate stored under {tag:?}",
                    self.id, est.part
                )));
            }
            est.validate(template)
                .map_err(|e| Error::InvalidInput(format!("frame {} {tag:?}: {e}", self.id)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateFile {
    pub version: u32,
    pub frames: Vec<EstimateFrame>,
}

impl EstimateFile {
    pub fn new(frames: Vec<EstimateFrame>) -> Self {
        Self {
            version: FORMAT_VERSION,
            frames,
        }
    }

    pub fn load(path: &Path, template: &ModelTemplate) -> Result<Self> {
        let file: Self = read_json(path)?;
        check_version(file.version, "estimate file")?;
        for f in &file.frames {
            f.validate(template)?;
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFrame {
    pub id: String,
    pub result: WholeBodyResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<FitReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub version: u32,
    pub strategy: String,
    pub frames: Vec<ResultFrame>,
}

impl ResultFile {
    pub fn load(path: &Path, template: &ModelTemplate) -> Result<Self> {
        let file: Self = read_json(path)?;
        check_version(file.version, "result file")?;
        for f in &file.frames {
            f.result.pose.check_dims(template)?;
        }
        Ok(file)
    }
}

/// Ground-truth whole-body state of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFrame {
    pub id: String,
    pub pose: PoseState,
    pub camera: WeakPerspectiveCamera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub version: u32,
    pub frames: Vec<TruthFrame>,
}

impl TruthFile {
    pub fn new(frames: Vec<TruthFrame>) -> Self {
        Self {
            version: FORMAT_VERSION,
            frames,
        }
    }

    pub fn load(path: &Path, template: &ModelTemplate) -> Result<Self> {
        let file: Self = read_json(path)?;
        check_version(file.version, "ground-truth file")?;
        for f in &file.frames {
            f.pose.check_dims(template)?;
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub version: u32,
    pub pose: PoseState,
}

impl PoseFile {
    pub fn load(path: &Path, template: &ModelTemplate) -> Result<PoseState> {
        let file: Self = read_json(path)?;
        check_version(file.version, "pose file")?;
        file.pose.validate(template)?;
        Ok(file.pose)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRecord {
    /// Row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshFile {
    pub version: u32,
    pub vertices: Vec<Vec3>,
    pub joints3d: Vec<Vec3>,
    pub global_transforms: Vec<TransformRecord>,
}

impl MeshFile {
    pub fn new(mesh: &PosedMesh) -> Self {
        Self {
            version: FORMAT_VERSION,
            vertices: mesh.vertices.clone(),
            joints3d: mesh.joints3d.clone(),
            global_transforms: mesh
                .global_transforms
                .iter()
                .map(|t| TransformRecord {
                    rotation: std::array::from_fn(|r| std::array::from_fn(|c| t.rotation[(r, c)])),
                    translation: t.translation,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub version: u32,
    pub seed: u64,
    pub report: SynthReport,
    pub samples: Vec<WristTrainSample>,
}

impl DatasetFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = read_json(path)?;
        check_version(file.version, "wrist dataset")?;
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub samples: usize,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WristNetFile {
    pub version: u32,
    pub activation: Activation,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingRecord>,
}

impl WristNetFile {
    pub fn new(net: &WristNet, training: Option<TrainingRecord>) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                rows: l.weights.nrows(),
                cols: l.weights.ncols(),
                weights: l.weights.transpose().as_slice().to_vec(),
                bias: l.bias.as_slice().to_vec(),
            })
            .collect();
        Self {
            version: FORMAT_VERSION,
            activation: net.activation(),
            layers,
            training,
        }
    }

    pub fn into_net(self) -> Result<WristNet> {
        check_version(self.version, "wrist-net file")?;
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                if l.weights.len() != l.rows * l.cols {
                    return Err(Error::dims(format!(
                        "layer {i}: {} weights for {}x{}",
                        l.weights.len(),
                        l.rows,
                        l.cols
                    )));
                }
                Ok(Layer {
                    weights: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                    bias: DVector::from_vec(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        WristNet::from_layers(layers, self.activation)
    }

    pub fn load(path: &Path) -> Result<WristNet> {
        read_json::<Self>(path)?.into_net()
    }
}
