//! Parametric skinned hand: a 778-vertex mesh and 21 joints driven by pose
//! PCA coefficients, shape coefficients and a global rigid transform.
//!
//! The posing pipeline is generic over [`Scalar`] so the same code yields
//! values (on `f64`) and the vertex Jacobian (on [`Dual`] lanes).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dual::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::math::{self, Vec3};

pub const NUM_VERTICES: usize = 778;
pub const NUM_SKELETON_JOINTS: usize = 16;
pub const NUM_JOINTS: usize = 21;
pub const NUM_SHAPE: usize = 10;
pub const NUM_POSE: usize = 45;
pub const FORMAT_VERSION: u64 = 1;

/// Output joint order: wrist, then MCP/PIP/DIP/tip for thumb, index, middle, ring, pinky.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "wrist",
    "thumb_mcp",
    "thumb_pip",
    "thumb_dip",
    "thumb_tip",
    "index_mcp",
    "index_pip",
    "index_dip",
    "index_tip",
    "middle_mcp",
    "middle_pip",
    "middle_dip",
    "middle_tip",
    "ring_mcp",
    "ring_pip",
    "ring_dip",
    "ring_tip",
    "pinky_mcp",
    "pinky_pip",
    "pinky_dip",
    "pinky_tip",
];

/// Below this axis-angle norm Rodrigues' formula switches to its Taylor series.
pub const RODRIGUES_TAYLOR_THRESHOLD: f64 = 1e-8;

const TANGENT_LANES: usize = 8;

/// Sparse row of a linear vertex regressor.
#[derive(Debug, Clone, PartialEq)]
struct SparseRow(Vec<(usize, f64)>);

impl SparseRow {
    fn from_dense(row: &[f64]) -> Self {
        SparseRow(
            row.iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i, *w))
                .collect(),
        )
    }

    fn apply<S: Scalar>(&self, points: &[[S; 3]]) -> [S; 3] {
        let mut acc = [S::cst(0.0); 3];
        for &(i, w) in &self.0 {
            let p = points[i];
            acc = [acc[0] + p[0] * w, acc[1] + p[1] * w, acc[2] + p[2] * w];
        }
        acc
    }
}

/// Immutable hand model. Construct with [`HandModel::from_parts`],
/// [`load_model`] or [`crate::stylized::make_stylized_hand`].
#[derive(Debug, Clone, PartialEq)]
pub struct HandModel {
    template_vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    /// `[vertex][coord][component]`
    shape_basis: Vec<[[f64; NUM_SHAPE]; 3]>,
    /// 45 rows, `n_pc` columns.
    pose_pca_basis: Vec<Vec<f64>>,
    pose_mean: Vec<f64>,
    /// `[vertex][coord][pose entry]`
    pose_corrective_basis: Vec<[[f64; NUM_POSE]; 3]>,
    skinning_weights: Vec<[f64; NUM_SKELETON_JOINTS]>,
    kinematic_parents: [i64; NUM_SKELETON_JOINTS],
    joint_regressor: Vec<Vec<f64>>,
    rest_joint_regressor: Vec<Vec<f64>>,
    n_pc: usize,

    has_correctives: bool,
    joint_rows: Vec<SparseRow>,
    rest_joint_rows: Vec<SparseRow>,
    skin_sparse: Vec<Vec<(usize, f64)>>,
}

/// On-disk layout of a model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u64,
    pub n_pc: usize,
    #[serde(default)]
    pub joint_order: Vec<String>,
    pub template_vertices: Vec<Vec<f64>>,
    pub faces: Vec<Vec<i64>>,
    pub shape_basis: Vec<Vec<Vec<f64>>>,
    pub pose_pca_basis: Vec<Vec<f64>>,
    pub pose_mean: Vec<f64>,
    pub pose_corrective_basis: Vec<Vec<Vec<f64>>>,
    pub skinning_weights: Vec<Vec<f64>>,
    pub kinematic_parents: Vec<i64>,
    pub joint_regressor: Vec<Vec<f64>>,
    pub rest_joint_regressor: Vec<Vec<f64>>,
}

/// Optimization variables of the hand model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandParams {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl HandParams {
    pub fn zeros(n_pc: usize) -> Self {
        Self {
            theta: vec![0.0; n_pc],
            beta: vec![0.0; NUM_SHAPE],
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len() + NUM_SHAPE + 6
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattens to `theta ++ beta ++ rotation ++ translation`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.rotation);
        v.extend_from_slice(&self.translation);
        v
    }

    pub fn from_slice(values: &[f64], n_pc: usize) -> Result<Self> {
        if values.len() != n_pc + NUM_SHAPE + 6 {
            return Err(Error::dim("params", n_pc + NUM_SHAPE + 6, values.len()));
        }
        let b = n_pc + NUM_SHAPE;
        Ok(Self {
            theta: values[..n_pc].to_vec(),
            beta: values[n_pc..b].to_vec(),
            rotation: [values[b], values[b + 1], values[b + 2]],
            translation: [values[b + 3], values[b + 4], values[b + 5]],
        })
    }

    /// Parameter names in flattened order.
    pub fn names(n_pc: usize) -> Vec<String> {
        let mut names: Vec<String> = (0..n_pc).map(|i| format!("theta[{i}]")).collect();
        names.extend((0..NUM_SHAPE).map(|i| format!("beta[{i}]")));
        names.extend((0..3).map(|i| format!("rotation[{i}]")));
        names.extend((0..3).map(|i| format!("translation[{i}]")));
        names
    }

    pub fn validate(&self, n_pc: usize) -> Result<()> {
        if self.theta.len() != n_pc {
            return Err(Error::dim("theta", n_pc, self.theta.len()));
        }
        if self.beta.len() != NUM_SHAPE {
            return Err(Error::dim("beta", NUM_SHAPE, self.beta.len()));
        }
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                term: "params".into(),
            });
        }
        Ok(())
    }
}

/// Posed mesh vertices (faces are shared with the model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandMesh {
    pub vertices: Vec<Vec3>,
}

/// 21 joint positions in [`JOINT_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joints {
    pub positions: Vec<Vec3>,
}

/// Posed vertices plus the Jacobian of every vertex coordinate with respect
/// to the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct PoseJacobian {
    pub vertices: Vec<Vec3>,
    /// `jac[p * 3 * V + v * 3 + c]`
    pub jac: Vec<f64>,
    pub n_params: usize,
}

impl PoseJacobian {
    /// `J^T g` for a per-vertex gradient `g`.
    pub fn transpose_apply(&self, grad: &[Vec3]) -> Vec<f64> {
        let nv = self.vertices.len();
        (0..self.n_params)
            .map(|p| {
                let col = &self.jac[p * 3 * nv..(p + 1) * 3 * nv];
                let mut s = 0.0;
                for (v, g) in grad.iter().enumerate() {
                    s += col[3 * v] * g[0] + col[3 * v + 1] * g[1] + col[3 * v + 2] * g[2];
                }
                s
            })
            .collect()
    }
}

fn parse_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn fixed<const N: usize>(field: &str, row: &[f64]) -> Result<[f64; N]> {
    row.try_into()
        .map_err(|_| Error::dim(field, N, row.len()))
}

fn check_finite(field: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::invariant(field, "contains non-finite values"))
    }
}

impl HandModel {
    /// Builds and validates a model from its arrays.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        template_vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        shape_basis: Vec<[[f64; NUM_SHAPE]; 3]>,
        pose_pca_basis: Vec<Vec<f64>>,
        pose_mean: Vec<f64>,
        pose_corrective_basis: Vec<[[f64; NUM_POSE]; 3]>,
        skinning_weights: Vec<[f64; NUM_SKELETON_JOINTS]>,
        kinematic_parents: [i64; NUM_SKELETON_JOINTS],
        joint_regressor: Vec<Vec<f64>>,
        rest_joint_regressor: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_pc = pose_pca_basis.first().map_or(0, Vec::len);
        let has_correctives = pose_corrective_basis
            .iter()
            .any(|v| v.iter().any(|c| c.iter().any(|x| *x != 0.0)));
        let joint_rows = joint_regressor.iter().map(|r| SparseRow::from_dense(r)).collect();
        let rest_joint_rows = rest_joint_regressor
            .iter()
            .map(|r| SparseRow::from_dense(r))
            .collect();
        let skin_sparse = skinning_weights
            .iter()
            .map(|w| {
                w.iter()
                    .enumerate()
                    .filter(|(_, x)| **x != 0.0)
                    .map(|(j, x)| (j, *x))
                    .collect()
            })
            .collect();
        let model = Self {
            template_vertices,
            faces,
            shape_basis,
            pose_pca_basis,
            pose_mean,
            pose_corrective_basis,
            skinning_weights,
            kinematic_parents,
            joint_regressor,
            rest_joint_regressor,
            n_pc,
            has_correctives,
            joint_rows,
            rest_joint_rows,
            skin_sparse,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks every structural invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.template_vertices.len() != NUM_VERTICES {
            return Err(Error::dim(
                "template_vertices",
                NUM_VERTICES,
                self.template_vertices.len(),
            ));
        }
        check_finite("template_vertices", self.template_vertices.iter().flatten().copied())?;
        if self.faces.is_empty() {
            return Err(Error::invariant("faces", "no faces"));
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= NUM_VERTICES)) {
            return Err(Error::invariant(
                "faces",
                format!("index out of range in face {f:?}"),
            ));
        }
        if self.shape_basis.len() != NUM_VERTICES {
            return Err(Error::dim("shape_basis", NUM_VERTICES, self.shape_basis.len()));
        }
        check_finite("shape_basis", self.shape_basis.iter().flatten().flatten().copied())?;
        if !matches!(self.n_pc, 6 | 45) {
            return Err(Error::invariant(
                "pose_pca_basis",
                format!("n_pc must be 6 or 45, found {}", self.n_pc),
            ));
        }
        if self.pose_pca_basis.len() != NUM_POSE {
            return Err(Error::dim("pose_pca_basis", NUM_POSE, self.pose_pca_basis.len()));
        }
        if let Some(r) = self.pose_pca_basis.iter().find(|r| r.len() != self.n_pc) {
            return Err(Error::dim("pose_pca_basis", self.n_pc, r.len()));
        }
        check_finite("pose_pca_basis", self.pose_pca_basis.iter().flatten().copied())?;
        if self.pose_mean.len() != NUM_POSE {
            return Err(Error::dim("pose_mean", NUM_POSE, self.pose_mean.len()));
        }
        check_finite("pose_mean", self.pose_mean.iter().copied())?;
        if self.pose_corrective_basis.len() != NUM_VERTICES {
            return Err(Error::dim(
                "pose_corrective_basis",
                NUM_VERTICES,
                self.pose_corrective_basis.len(),
            ));
        }
        check_finite(
            "pose_corrective_basis",
            self.pose_corrective_basis.iter().flatten().flatten().copied(),
        )?;
        if self.skinning_weights.len() != NUM_VERTICES {
            return Err(Error::dim(
                "skinning_weights",
                NUM_VERTICES,
                self.skinning_weights.len(),
            ));
        }
        for (v, w) in self.skinning_weights.iter().enumerate() {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::invariant(
                    "skinning_weights",
                    format!("row {v} has a negative or non-finite weight"),
                ));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invariant(
                    "skinning_weights",
                    format!("row {v} sums to {s}, expected 1"),
                ));
            }
        }
        if self.kinematic_parents[0] != -1 {
            return Err(Error::invariant("kinematic_parents", "joint 0 must be the root (-1)"));
        }
        for (j, &p) in self.kinematic_parents.iter().enumerate().skip(1) {
            // Parents precede children, which rules out cycles.
            if p < 0 || p as usize >= j {
                return Err(Error::invariant(
                    "kinematic_parents",
                    format!("joint {j} has parent {p}; parents must precede children"),
                ));
            }
        }
        if self.joint_regressor.len() != NUM_JOINTS {
            return Err(Error::dim("joint_regressor", NUM_JOINTS, self.joint_regressor.len()));
        }
        for (j, row) in self.joint_regressor.iter().enumerate() {
            if row.len() != NUM_VERTICES {
                return Err(Error::dim("joint_regressor", NUM_VERTICES, row.len()));
            }
            check_finite("joint_regressor", row.iter().copied())?;
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invariant(
                    "joint_regressor",
                    format!("row {j} sums to {s}, expected 1"),
                ));
            }
        }
        if self.rest_joint_regressor.len() != NUM_SKELETON_JOINTS {
            return Err(Error::dim(
                "rest_joint_regressor",
                NUM_SKELETON_JOINTS,
                self.rest_joint_regressor.len(),
            ));
        }
        for row in &self.rest_joint_regressor {
            if row.len() != NUM_VERTICES {
                return Err(Error::dim("rest_joint_regressor", NUM_VERTICES, row.len()));
            }
            check_finite("rest_joint_regressor", row.iter().copied())?;
        }
        Ok(())
    }

    pub fn n_pc(&self) -> usize {
        self.n_pc
    }

    pub fn n_params(&self) -> usize {
        self.n_pc + NUM_SHAPE + 6
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn template_vertices(&self) -> &[Vec3] {
        &self.template_vertices
    }

    pub fn skinning_weights(&self) -> &[[f64; NUM_SKELETON_JOINTS]] {
        &self.skinning_weights
    }

    pub fn kinematic_parents(&self) -> &[i64; NUM_SKELETON_JOINTS] {
        &self.kinematic_parents
    }

    pub fn pose_mean(&self) -> &[f64] {
        &self.pose_mean
    }

    pub fn pose_pca_basis(&self) -> &[Vec<f64>] {
        &self.pose_pca_basis
    }

    pub fn shape_basis(&self) -> &[[[f64; NUM_SHAPE]; 3]] {
        &self.shape_basis
    }

    pub fn joint_regressor(&self) -> &[Vec<f64>] {
        &self.joint_regressor
    }

    pub fn rest_joint_regressor(&self) -> &[Vec<f64>] {
        &self.rest_joint_regressor
    }

    /// Returns a copy with a different mean pose (validated).
    pub fn with_pose_mean(&self, pose_mean: Vec<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.pose_mean = pose_mean;
        m.validate()?;
        Ok(m)
    }

    /// Returns a copy with a different pose-corrective basis (validated).
    pub fn with_pose_correctives(&self, basis: Vec<[[f64; NUM_POSE]; 3]>) -> Result<Self> {
        let mut m = self.clone();
        m.has_correctives = basis.iter().any(|v| v.iter().any(|c| c.iter().any(|x| *x != 0.0)));
        m.pose_corrective_basis = basis;
        m.validate()?;
        Ok(m)
    }

    pub fn from_file_struct(file: ModelFile) -> Result<Self> {
        if file.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: file.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if !file.joint_order.is_empty() && file.joint_order.len() != NUM_JOINTS {
            return Err(Error::dim("joint_order", NUM_JOINTS, file.joint_order.len()));
        }
        let template_vertices = file
            .template_vertices
            .iter()
            .map(|r| fixed::<3>("template_vertices", r))
            .collect::<Result<Vec<_>>>()?;
        let faces = file
            .faces
            .iter()
            .map(|f| {
                if f.len() != 3 {
                    return Err(Error::dim("faces", 3, f.len()));
                }
                let mut out = [0u32; 3];
                for (o, &i) in out.iter_mut().zip(f) {
                    if i < 0 || i as usize >= NUM_VERTICES {
                        return Err(Error::invariant("faces", format!("index {i} out of range")));
                    }
                    *o = i as u32;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let shape_basis = file
            .shape_basis
            .iter()
            .map(|v| {
                if v.len() != 3 {
                    return Err(Error::dim("shape_basis", 3, v.len()));
                }
                Ok([
                    fixed::<NUM_SHAPE>("shape_basis", &v[0])?,
                    fixed::<NUM_SHAPE>("shape_basis", &v[1])?,
                    fixed::<NUM_SHAPE>("shape_basis", &v[2])?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let pose_corrective_basis = file
            .pose_corrective_basis
            .iter()
            .map(|v| {
                if v.len() != 3 {
                    return Err(Error::dim("pose_corrective_basis", 3, v.len()));
                }
                Ok([
                    fixed::<NUM_POSE>("pose_corrective_basis", &v[0])?,
                    fixed::<NUM_POSE>("pose_corrective_basis", &v[1])?,
                    fixed::<NUM_POSE>("pose_corrective_basis", &v[2])?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let skinning_weights = file
            .skinning_weights
            .iter()
            .map(|r| fixed::<NUM_SKELETON_JOINTS>("skinning_weights", r))
            .collect::<Result<Vec<_>>>()?;
        let kinematic_parents: [i64; NUM_SKELETON_JOINTS] = file
            .kinematic_parents
            .as_slice()
            .try_into()
            .map_err(|_| Error::dim("kinematic_parents", NUM_SKELETON_JOINTS, file.kinematic_parents.len()))?;
        let model = Self::from_parts(
            template_vertices,
            faces,
            shape_basis,
            file.pose_pca_basis,
            file.pose_mean,
            pose_corrective_basis,
            skinning_weights,
            kinematic_parents,
            file.joint_regressor,
            file.rest_joint_regressor,
        )?;
        if model.n_pc != file.n_pc {
            return Err(Error::dim("n_pc", model.n_pc, file.n_pc));
        }
        Ok(model)
    }

    pub fn to_file_struct(&self) -> ModelFile {
        ModelFile {
            format_version: FORMAT_VERSION,
            n_pc: self.n_pc,
            joint_order: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            template_vertices: self.template_vertices.iter().map(|v| v.to_vec()).collect(),
            faces: self
                .faces
                .iter()
                .map(|f| f.iter().map(|&i| i as i64).collect())
                .collect(),
            shape_basis: self
                .shape_basis
                .iter()
                .map(|v| v.iter().map(|c| c.to_vec()).collect())
                .collect(),
            pose_pca_basis: self.pose_pca_basis.clone(),
            pose_mean: self.pose_mean.clone(),
            pose_corrective_basis: self
                .pose_corrective_basis
                .iter()
                .map(|v| v.iter().map(|c| c.to_vec()).collect())
                .collect(),
            skinning_weights: self.skinning_weights.iter().map(|w| w.to_vec()).collect(),
            kinematic_parents: self.kinematic_parents.to_vec(),
            joint_regressor: self.joint_regressor.clone(),
            rest_joint_regressor: self.rest_joint_regressor.clone(),
        }
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_file_struct()).expect("model serialization cannot fail")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_slice(bytes).map_err(|e| parse_err("model", e.to_string()))?;
        Self::from_file_struct(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_bytes()))
    }

    /// Posed mesh and regressed joints.
    pub fn pose(&self, params: &HandParams) -> Result<(HandMesh, Joints)> {
        pose_mesh(self, params)
    }
}

/// Reads and validates a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<HandModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    HandModel::from_json_bytes(&bytes)
}

/// `R - I` for the axis-angle vector `w`; exact zero at `w = 0`.
pub fn rodrigues_minus_identity<S: Scalar>(w: [S; 3]) -> [[S; 3]; 3] {
    let theta_sq = math::dot(w, w);
    let (a, b) = if theta_sq.value() < RODRIGUES_TAYLOR_THRESHOLD * RODRIGUES_TAYLOR_THRESHOLD {
        (
            S::cst(1.0) + theta_sq * (-1.0 / 6.0),
            S::cst(0.5) + theta_sq * (-1.0 / 24.0),
        )
    } else {
        let theta = theta_sq.sqrt();
        let half = (theta * 0.5).sin();
        (theta.sin() / theta, half * half * 2.0 / theta_sq)
    };
    let zero = S::cst(0.0);
    let k = [[zero, -w[2], w[1]], [w[2], zero, -w[0]], [-w[1], w[0], zero]];
    let k2 = math::mat_mul(&k, &k);
    let mut out = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = k[i][j] * a + k2[i][j] * b;
        }
    }
    out
}

/// Rotation matrix for an axis-angle vector.
pub fn rodrigues(axis_angle: Vec3) -> math::Mat3 {
    let mut r = rodrigues_minus_identity(axis_angle);
    for (i, row) in r.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    r
}

/// Axis-angle vector of a rotation matrix (angle in `[0, pi]`).
pub fn axis_angle_from_matrix(r: &math::Mat3) -> Vec3 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let vee = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if angle < 1e-6 {
        return math::scale(vee, 0.5);
    }
    if std::f64::consts::PI - angle > 1e-4 {
        return math::scale(vee, angle / (2.0 * angle.sin()));
    }
    // Near pi: axis from the symmetric part, R + I ~ 2 n n^T.
    let diag = [r[0][0], r[1][1], r[2][2]];
    let k = (0..3).max_by(|&a, &b| diag[a].total_cmp(&diag[b])).unwrap_or(0);
    let mut n = [0.0; 3];
    n[k] = ((diag[k] + 1.0) * 0.5).max(0.0).sqrt();
    for i in 0..3 {
        if i != k {
            n[i] = (r[i][k] + r[k][i]) / (4.0 * n[k]);
        }
    }
    let len = math::norm(n);
    let mut n = math::scale(n, 1.0 / len);
    if math::dot(n, vee) < 0.0 {
        n = math::scale(n, -1.0);
    }
    math::scale(n, angle)
}

/// Full 45-dimensional articulation vector `pose_mean + basis * theta`.
pub fn full_pose(theta: &[f64], model: &HandModel) -> Result<Vec<f64>> {
    if theta.len() != model.n_pc {
        return Err(Error::dim("theta", model.n_pc, theta.len()));
    }
    Ok(full_pose_generic(theta, model))
}

fn full_pose_generic<S: Scalar>(theta: &[S], model: &HandModel) -> Vec<S> {
    model
        .pose_pca_basis
        .iter()
        .zip(&model.pose_mean)
        .map(|(row, &mean)| {
            let mut acc = S::cst(mean);
            for (t, &b) in theta.iter().zip(row) {
                if b != 0.0 {
                    acc += *t * b;
                }
            }
            acc
        })
        .collect()
}

/// Core posing pipeline; returns posed vertices in camera space.
fn pose_vertices_generic<S: Scalar>(
    model: &HandModel,
    theta: &[S],
    beta: &[S],
    rotation: [S; 3],
    translation: [S; 3],
) -> Vec<[S; 3]> {
    let zero = S::cst(0.0);
    // Shape blend.
    let mut shaped: Vec<[S; 3]> = model
        .template_vertices
        .iter()
        .zip(&model.shape_basis)
        .map(|(t, basis)| {
            let mut v = [S::cst(t[0]), S::cst(t[1]), S::cst(t[2])];
            for c in 0..3 {
                for (k, b) in beta.iter().enumerate() {
                    let coef = basis[c][k];
                    if coef != 0.0 {
                        v[c] += *b * coef;
                    }
                }
            }
            v
        })
        .collect();

    let rest_joints: Vec<[S; 3]> = model.rest_joint_rows.iter().map(|r| r.apply(&shaped)).collect();
    let pose = full_pose_generic(theta, model);

    if model.has_correctives {
        for (v, basis) in shaped.iter_mut().zip(&model.pose_corrective_basis) {
            for c in 0..3 {
                for (i, p) in pose.iter().enumerate() {
                    let coef = basis[c][i];
                    if coef != 0.0 {
                        v[c] += *p * coef;
                    }
                }
            }
        }
    }

    // Forward kinematics, tracked as (world rotation - I) and joint displacement.
    let mut world_minus_i = vec![[[zero; 3]; 3]; NUM_SKELETON_JOINTS];
    let mut displacement = vec![[zero; 3]; NUM_SKELETON_JOINTS];
    for j in 1..NUM_SKELETON_JOINTS {
        let p = model.kinematic_parents[j] as usize;
        let local = rodrigues_minus_identity([pose[3 * (j - 1)], pose[3 * (j - 1) + 1], pose[3 * (j - 1) + 2]]);
        let wp = world_minus_i[p];
        // (Wp + I)(L + I) - I = Wp L + Wp + L
        world_minus_i[j] = math::mat_add(&math::mat_add(&math::mat_mul(&wp, &local), &wp), &local);
        let bone = math::sub(rest_joints[j], rest_joints[p]);
        displacement[j] = math::add(displacement[p], math::mat_vec(&wp, bone));
    }

    // Linear blend skinning relative to the rest pose.
    let skinned: Vec<[S; 3]> = shaped
        .iter()
        .zip(&model.skin_sparse)
        .map(|(v, weights)| {
            let mut out = *v;
            for &(j, w) in weights {
                let rel = math::sub(*v, rest_joints[j]);
                let moved = math::add(math::mat_vec(&world_minus_i[j], rel), displacement[j]);
                out = [out[0] + moved[0] * w, out[1] + moved[1] * w, out[2] + moved[2] * w];
            }
            out
        })
        .collect();

    // Global rotation about the wrist, then translation.
    let global = rodrigues_minus_identity(rotation);
    let pivot = rest_joints[0];
    skinned
        .iter()
        .map(|v| {
            let r = math::mat_vec(&global, math::sub(*v, pivot));
            math::add(math::add(*v, r), translation)
        })
        .collect()
}

/// Poses the model: shape blend, rest joints, correctives, forward
/// kinematics, skinning, global transform, joint regression.
pub fn pose_mesh(model: &HandModel, params: &HandParams) -> Result<(HandMesh, Joints)> {
    params.validate(model.n_pc)?;
    let vertices = pose_vertices_generic(
        model,
        &params.theta,
        &params.beta,
        params.rotation,
        params.translation,
    );
    let mesh = HandMesh { vertices };
    let joints = regress_joints(model, &mesh)?;
    Ok((mesh, joints))
}

/// `joint_regressor * vertices`.
pub fn regress_joints(model: &HandModel, mesh: &HandMesh) -> Result<Joints> {
    if mesh.vertices.len() != NUM_VERTICES {
        return Err(Error::dim("mesh.vertices", NUM_VERTICES, mesh.vertices.len()));
    }
    Ok(Joints {
        positions: model.joint_rows.iter().map(|r| r.apply(&mesh.vertices)).collect(),
    })
}

/// Adjoint of [`regress_joints`]: accumulates `R^T g` into `out`.
pub fn regress_joints_transpose(model: &HandModel, grad_joints: &[Vec3], out: &mut [Vec3]) {
    for (row, g) in model.joint_rows.iter().zip(grad_joints) {
        for &(i, w) in &row.0 {
            for c in 0..3 {
                out[i][c] += w * g[c];
            }
        }
    }
}

/// Posed vertices and their Jacobian with respect to the flattened params,
/// computed by forward-mode differentiation in chunks of tangent lanes.
pub fn pose_jacobian(model: &HandModel, params: &HandParams) -> Result<PoseJacobian> {
    params.validate(model.n_pc)?;
    let flat = params.to_vec();
    let n_params = flat.len();
    let nv = NUM_VERTICES;
    let mut jac = vec![0.0; n_params * 3 * nv];
    let mut vertices = Vec::new();
    let n_pc = model.n_pc;
    for start in (0..n_params).step_by(TANGENT_LANES) {
        let lane = |i: usize| (i >= start && i < start + TANGENT_LANES).then(|| i - start);
        let d: Vec<Dual<TANGENT_LANES>> = flat
            .iter()
            .enumerate()
            .map(|(i, &x)| Dual::variable(x, lane(i)))
            .collect();
        let b = n_pc + NUM_SHAPE;
        let out = pose_vertices_generic(
            model,
            &d[..n_pc],
            &d[n_pc..b],
            [d[b], d[b + 1], d[b + 2]],
            [d[b + 3], d[b + 4], d[b + 5]],
        );
        for (v, p) in out.iter().enumerate() {
            for c in 0..3 {
                for l in 0..TANGENT_LANES.min(n_params - start) {
                    jac[(start + l) * 3 * nv + 3 * v + c] = p[c].eps[l];
                }
            }
        }
        if start == 0 {
            vertices = out.iter().map(|p| [p[0].re, p[1].re, p[2].re]).collect();
        }
    }
    Ok(PoseJacobian {
        vertices,
        jac,
        n_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stylized::make_stylized_hand;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Matrix exponential of the skew matrix by truncated power series.
    fn expm_series(w: Vec3) -> math::Mat3 {
        let k = [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]];
        let mut out = math::IDENTITY;
        let mut term = math::IDENTITY;
        for n in 1..=20 {
            term = math::mat_mul(&term, &k);
            let inv = 1.0 / n as f64;
            for row in term.iter_mut() {
                for x in row.iter_mut() {
                    *x *= inv;
                }
            }
            out = math::mat_add(&out, &term);
        }
        out
    }

    #[test]
    fn rodrigues_identity_and_quarter_turn() {
        assert_eq!(rodrigues([0.0; 3]), math::IDENTITY);
        let r = rodrigues([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let x = math::mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!((x[0]).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15 && x[2].abs() < 1e-15);
    }

    #[test]
    fn rodrigues_matches_series_and_is_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let w = [
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            ];
            let r = rodrigues(w);
            assert!(math::mat_dist(&r, &expm_series(w)) < 1e-9);
            let rtr = math::mat_mul(&math::transpose(&r), &r);
            assert!(math::mat_dist(&rtr, &math::IDENTITY) < 1e-9);
            assert!((math::det(&r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rodrigues_taylor_branch_is_continuous() {
        let w = [3e-9, -2e-9, 1e-9];
        let below = rodrigues(w);
        let above = rodrigues(math::scale(w, 10.0));
        assert!(math::mat_dist(&below, &expm_series(w)) < 1e-15);
        assert!(math::mat_dist(&above, &expm_series(math::scale(w, 10.0))) < 1e-15);
        // Derivative through the Taylor branch is the skew generator.
        let d = rodrigues_minus_identity([
            Dual::<1>::variable(0.0, Some(0)),
            Dual::constant(0.0),
            Dual::constant(0.0),
        ]);
        assert_eq!(d[2][1].eps[0], 1.0);
        assert_eq!(d[1][2].eps[0], -1.0);
    }

    #[test]
    fn axis_angle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let angle = rng.random_range(1e-3..std::f64::consts::PI - 0.1);
            let axis = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0f64),
            ];
            let axis = math::scale(axis, 1.0 / math::norm(axis));
            let w = math::scale(axis, angle);
            let back = axis_angle_from_matrix(&rodrigues(w));
            assert!(math::norm(math::sub(back, w)) < 1e-8, "{w:?} -> {back:?}");
        }
    }

    #[test]
    fn full_pose_cases() {
        let model = make_stylized_hand(6);
        assert_eq!(full_pose(&[0.0; 6], &model).unwrap(), model.pose_mean);
        let mut e1 = [0.0; 6];
        e1[0] = 1.0;
        let p = full_pose(&e1, &model).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1..].iter().all(|x| *x == 0.0));
        assert!(full_pose(&[0.0; 5], &model).is_err());
    }

    #[test]
    fn full_pose_matches_dense_matvec() {
        let base = make_stylized_hand(45);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean: Vec<f64> = (0..NUM_POSE).map(|_| rng.random_range(-0.2..0.2)).collect();
        let model = base.with_pose_mean(mean.clone()).unwrap();
        let theta: Vec<f64> = (0..45).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = full_pose(&theta, &model).unwrap();
        for i in 0..NUM_POSE {
            let mut want = mean[i];
            for c in 0..45 {
                want += model.pose_pca_basis[i][c] * theta[c];
            }
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_reproduce_template() {
        let model = make_stylized_hand(6);
        let (mesh, _) = pose_mesh(&model, &HandParams::zeros(6)).unwrap();
        assert_eq!(mesh.vertices, model.template_vertices);
    }

    #[test]
    fn regress_joints_is_linear_and_translation_covariant() {
        let model = make_stylized_hand(6);
        let zero = HandMesh {
            vertices: vec![[0.0; 3]; NUM_VERTICES],
        };
        let j = regress_joints(&model, &zero).unwrap();
        assert!(j.positions.iter().flatten().all(|x| *x == 0.0));
        let t = [0.1, -0.2, 0.3];
        let base = HandMesh {
            vertices: model.template_vertices.clone(),
        };
        let shifted = HandMesh {
            vertices: base.vertices.iter().map(|v| math::add(*v, t)).collect(),
        };
        let a = regress_joints(&model, &base).unwrap();
        let b = regress_joints(&model, &shifted).unwrap();
        for (p, q) in a.positions.iter().zip(&b.positions) {
            assert!(math::norm(math::sub(math::sub(*q, *p), t)) < 1e-12);
        }
        assert!(regress_joints(&model, &HandMesh { vertices: vec![] }).is_err());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let model = make_stylized_hand(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut flat: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let n = flat.len();
        flat[n - 1] += 0.5;
        let params = HandParams::from_slice(&flat, 6).unwrap();
        let jac = pose_jacobian(&model, &params).unwrap();
        let (mesh, _) = pose_mesh(&model, &params).unwrap();
        for (a, b) in jac.vertices.iter().zip(&mesh.vertices) {
            assert!(math::norm(math::sub(*a, *b)) < 1e-12, "{a:?} vs {b:?}");
        }
        let h = 1e-6;
        for p in 0..n {
            let mut plus = flat.clone();
            plus[p] += h;
            let mut minus = flat.clone();
            minus[p] -= h;
            let (mp, _) = pose_mesh(&model, &HandParams::from_slice(&plus, 6).unwrap()).unwrap();
            let (mm, _) = pose_mesh(&model, &HandParams::from_slice(&minus, 6).unwrap()).unwrap();
            for v in (0..NUM_VERTICES).step_by(37) {
                for c in 0..3 {
                    let fd = (mp.vertices[v][c] - mm.vertices[v][c]) / (2.0 * h);
                    let an = jac.jac[p * 3 * NUM_VERTICES + 3 * v + c];
                    assert!((fd - an).abs() < 1e-7, "param {p} vertex {v}: {an} vs {fd}");
                }
            }
        }
    }
}
