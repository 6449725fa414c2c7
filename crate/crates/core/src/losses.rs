//! Training objectives: pose, aligned pose, silhouette (BCE + contour) and
//! mesh terms, their weighted total, and the adjoints of each.
//!
//! Pose and mesh terms are in meters (squared meters for the pose terms);
//! silhouette terms are in pixel units.

use serde::{Deserialize, Serialize};

use crate::alignment::{procrustes_align, PaVariant};
use crate::error::{Error, Result};
use crate::image_ops::{contour_term, DistanceField};
use crate::math::{self, Vec3};
use crate::silhouette::SilhouetteImage;

/// Cross-entropy clamp for rendered probabilities.
pub const BCE_CLAMP: f64 = 1e-7;

/// Relative weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    #[serde(rename = "lambda_J")]
    pub lambda_j: f64,
    #[serde(rename = "lambda_alignJ")]
    pub lambda_align_j: f64,
    pub lambda_bce: f64,
    pub lambda_contour: f64,
    #[serde(rename = "lambda_V")]
    pub lambda_v: f64,
    #[serde(rename = "lambda_alignV")]
    pub lambda_align_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_j: 2e-3,
            lambda_align_j: 2e-2,
            lambda_bce: 0.0,
            lambda_contour: 1e-4,
            lambda_v: 0.1,
            lambda_align_v: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self {
            lambda_j: 0.0,
            lambda_align_j: 0.0,
            lambda_bce: 0.0,
            lambda_contour: 0.0,
            lambda_v: 0.0,
            lambda_align_v: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_J", self.lambda_j),
            ("lambda_alignJ", self.lambda_align_j),
            ("lambda_bce", self.lambda_bce),
            ("lambda_contour", self.lambda_contour),
            ("lambda_V", self.lambda_v),
            ("lambda_alignV", self.lambda_align_v),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invariant(name, format!("must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Weights actually applied under `mode`.
    pub fn effective(&self, mode: Supervision) -> Self {
        match mode {
            Supervision::Full => *self,
            Supervision::SilhouetteOnly => Self {
                lambda_j: 0.0,
                lambda_align_j: 0.0,
                lambda_v: 0.0,
                lambda_align_v: 0.0,
                ..*self
            },
        }
    }
}

/// Which terms are supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Silhouette terms plus joint and vertex supervision.
    Full,
    /// Silhouette terms only, with a small pose/shape prior.
    #[serde(alias = "silhouette")]
    SilhouetteOnly,
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "silhouette" | "silhouette_only" => Ok(Self::SilhouetteOnly),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected full or silhouette)"))),
        }
    }
}

/// Individual (unweighted) terms and the weighted total.
///
/// `total = λ_J·pose + λ_alignJ·aligned_pose + λ_bce·bce + λ_contour·contour
/// + λ_V·mesh + λ_alignV·aligned_mesh + prior + offset_smooth + offset_l2`,
/// where the last three already include their own coefficients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pose: f64,
    pub aligned_pose: f64,
    pub bce: f64,
    pub contour: f64,
    pub mesh: f64,
    pub aligned_mesh: f64,
    pub prior: f64,
    pub offset_smooth: f64,
    pub offset_l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 10] = [
        "pose",
        "aligned_pose",
        "bce",
        "contour",
        "mesh",
        "aligned_mesh",
        "prior",
        "offset_smooth",
        "offset_l2",
        "total",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.pose,
            self.aligned_pose,
            self.bce,
            self.contour,
            self.mesh,
            self.aligned_mesh,
            self.prior,
            self.offset_smooth,
            self.offset_l2,
            self.total,
        ]
    }

    /// Recomputes `total` from the terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_j * self.pose
            + w.lambda_align_j * self.aligned_pose
            + w.lambda_bce * self.bce
            + w.lambda_contour * self.contour
            + w.lambda_v * self.mesh
            + w.lambda_align_v * self.aligned_mesh
            + self.prior
            + self.offset_smooth
            + self.offset_l2
    }

    /// Errors naming the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in Self::COLUMNS.iter().zip(self.values()) {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name.to_string() });
            }
        }
        Ok(())
    }
}

fn check_len(field: &str, a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(field, a.len(), b.len()));
    }
    Ok(())
}

/// `mean_k ‖gt_k − p_k‖²` and its gradient with respect to `p`.
fn mean_sq(gt: &[Vec3], p: &[Vec3]) -> (f64, Vec<Vec3>) {
    let k = gt.len() as f64;
    let mut value = 0.0;
    let grad = gt
        .iter()
        .zip(p)
        .map(|(g, q)| {
            let d = math::sub(*q, *g);
            value += math::dot(d, d);
            math::scale(d, 2.0 / k)
        })
        .collect();
    (value / k, grad)
}

/// `mean_k ‖gt_k − p_k‖₁` and its subgradient (`sign(0) = 0`).
fn mean_l1(gt: &[Vec3], p: &[Vec3]) -> (f64, Vec<Vec3>) {
    let k = gt.len() as f64;
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let mut value = 0.0;
    let grad = gt
        .iter()
        .zip(p)
        .map(|(g, q)| {
            let d = math::sub(*q, *g);
            value += d[0].abs() + d[1].abs() + d[2].abs();
            d.map(|x| sign(x) / k)
        })
        .collect();
    (value / k, grad)
}

/// Value and gradients with respect to the preliminary and refined inputs.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub value: f64,
    pub prelim: Vec<Vec3>,
    pub refined: Vec<Vec3>,
}

/// Mean squared joint error of the preliminary plus the refined joints.
pub fn pose_loss(gt: &[Vec3], prelim: &[Vec3], refined: &[Vec3]) -> Result<f64> {
    Ok(pose_loss_grad(gt, prelim, refined)?.value)
}

pub fn pose_loss_grad(gt: &[Vec3], prelim: &[Vec3], refined: &[Vec3]) -> Result<PairGrad> {
    check_len("prelim joints", gt, prelim)?;
    check_len("refined joints", gt, refined)?;
    let (a, ga) = mean_sq(gt, prelim);
    let (b, gb) = mean_sq(gt, refined);
    Ok(PairGrad {
        value: a + b,
        prelim: ga,
        refined: gb,
    })
}

/// [`pose_loss`] after Procrustes-aligning each prediction onto `gt`.
pub fn aligned_pose_loss(gt: &[Vec3], prelim: &[Vec3], refined: &[Vec3], variant: PaVariant) -> Result<f64> {
    Ok(aligned_pose_loss_grad(gt, prelim, refined, variant)?.value)
}

pub fn aligned_pose_loss_grad(gt: &[Vec3], prelim: &[Vec3], refined: &[Vec3], variant: PaVariant) -> Result<PairGrad> {
    aligned(gt, prelim, refined, variant, mean_sq)
}

fn aligned(
    gt: &[Vec3],
    prelim: &[Vec3],
    refined: &[Vec3],
    variant: PaVariant,
    term: fn(&[Vec3], &[Vec3]) -> (f64, Vec<Vec3>),
) -> Result<PairGrad> {
    check_len("prelim", gt, prelim)?;
    check_len("refined", gt, refined)?;
    let pa = procrustes_align(gt, prelim, variant)?;
    let ra = procrustes_align(gt, refined, variant)?;
    let (a, ga) = term(gt, &pa.aligned);
    let (b, gb) = term(gt, &ra.aligned);
    Ok(PairGrad {
        value: a + b,
        prelim: pa.backward(&ga),
        refined: ra.backward(&gb),
    })
}

/// Mean per-vertex L1 error of the preliminary plus the refined mesh.
pub fn mesh_loss(gt: &[Vec3], prelim: &[Vec3], refined: &[Vec3]) -> Result<f64> {
    Ok(mesh_loss_grad(gt, prelim, refined)?.value)
}

pub fn mesh_loss_grad(gt: &[Vec3], prelim: &[Vec3], refined: &[Vec3]) -> Result<PairGrad> {
    check_len("prelim vertices", gt, prelim)?;
    check_len("refined vertices", gt, refined)?;
    let (a, ga) = mean_l1(gt, prelim);
    let (b, gb) = mean_l1(gt, refined);
    Ok(PairGrad {
        value: a + b,
        prelim: ga,
        refined: gb,
    })
}

/// [`mesh_loss`] after Procrustes-aligning each prediction onto `gt`.
pub fn aligned_mesh_loss(gt: &[Vec3], prelim: &[Vec3], refined: &[Vec3], variant: PaVariant) -> Result<f64> {
    Ok(aligned_mesh_loss_grad(gt, prelim, refined, variant)?.value)
}

pub fn aligned_mesh_loss_grad(gt: &[Vec3], prelim: &[Vec3], refined: &[Vec3], variant: PaVariant) -> Result<PairGrad> {
    aligned(gt, prelim, refined, variant, mean_l1)
}

fn check_dims(rendered: &SilhouetteImage, width: usize, height: usize, field: &str) -> Result<()> {
    if rendered.width() != width || rendered.height() != height {
        return Err(Error::dim(
            field,
            format!("{width}x{height}"),
            format!("{}x{}", rendered.width(), rendered.height()),
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy between rendered probabilities and a mask.
pub fn bce_loss(rendered: &SilhouetteImage, target: &SilhouetteImage) -> Result<f64> {
    Ok(bce_loss_grad(rendered, target)?.0)
}

/// BCE and its gradient with respect to the rendered pixels; zero where the
/// clamp is active.
pub fn bce_loss_grad(rendered: &SilhouetteImage, target: &SilhouetteImage) -> Result<(f64, Vec<f64>)> {
    check_dims(rendered, target.width(), target.height(), "rendered")?;
    let n = rendered.pixels().len() as f64;
    let mut value = 0.0;
    let grad = rendered
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(&s, &b)| {
            let c = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            value -= b * c.ln() + (1.0 - b) * (1.0 - c).ln();
            if s < BCE_CLAMP || s > 1.0 - BCE_CLAMP {
                0.0
            } else {
                (-b / c + (1.0 - b) / (1.0 - c)) / n
            }
        })
        .collect();
    Ok((value / n, grad))
}

/// Contour Chamfer term: soft contour of the rendering weighted by the
/// target's distance field.
pub fn contour_loss(rendered: &SilhouetteImage, dfield: &DistanceField, border_band: usize) -> Result<f64> {
    Ok(contour_loss_grad(rendered, dfield, border_band)?.0)
}

pub fn contour_loss_grad(rendered: &SilhouetteImage, dfield: &DistanceField, border_band: usize) -> Result<(f64, Vec<f64>)> {
    check_dims(rendered, dfield.width(), dfield.height(), "rendered")?;
    let ev = contour_term(rendered.pixels(), rendered.width(), rendered.height(), dfield, border_band);
    Ok((ev.value, ev.grad))
}

/// Ground-truth joints and vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub joints: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
}

/// Everything the total loss looks at.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub rendered: &'a SilhouetteImage,
    pub target: &'a SilhouetteImage,
    pub dfield: &'a DistanceField,
    pub border_band: usize,
    pub gt: Option<&'a GroundTruth>,
    pub prelim_joints: &'a [Vec3],
    pub refined_joints: &'a [Vec3],
    pub prelim_vertices: &'a [Vec3],
    pub refined_vertices: &'a [Vec3],
    pub pa_variant: PaVariant,
}

/// Gradients of the weighted total with respect to its inputs.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub rendered: Vec<f64>,
    pub prelim_joints: Vec<Vec3>,
    pub refined_joints: Vec<Vec3>,
    pub prelim_vertices: Vec<Vec3>,
    pub refined_vertices: Vec<Vec3>,
}

fn axpy(acc: &mut [Vec3], w: f64, g: &[Vec3]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for c in 0..3 {
            a[c] += w * b[c];
        }
    }
}

/// Weighted total of the image and supervision terms. Supervised terms are
/// evaluated (and reported) whenever ground truth is present, but only
/// weighted in in `Full` mode. `prior`, `offset_*` are left at zero for the
/// caller to fill.
pub fn total_loss(weights: &LossWeights, inputs: &LossInputs, mode: Supervision) -> Result<LossBreakdown> {
    Ok(total_loss_grad(weights, inputs, mode)?.0)
}

pub fn total_loss_grad(weights: &LossWeights, inputs: &LossInputs, mode: Supervision) -> Result<(LossBreakdown, LossGrads)> {
    weights.validate()?;
    if mode == Supervision::Full && inputs.gt.is_none() {
        return Err(Error::MissingGroundTruth);
    }
    let w = weights.effective(mode);
    let nj = inputs.prelim_joints.len();
    let nv = inputs.prelim_vertices.len();
    let mut out = LossBreakdown::default();
    let mut grads = LossGrads {
        rendered: vec![0.0; inputs.rendered.pixels().len()],
        prelim_joints: vec![[0.0; 3]; nj],
        refined_joints: vec![[0.0; 3]; nj],
        prelim_vertices: vec![[0.0; 3]; nv],
        refined_vertices: vec![[0.0; 3]; nv],
    };

    let (bce, g_bce) = bce_loss_grad(inputs.rendered, inputs.target)?;
    out.bce = bce;
    let (contour, g_contour) = contour_loss_grad(inputs.rendered, inputs.dfield, inputs.border_band)?;
    out.contour = contour;
    for ((g, a), b) in grads.rendered.iter_mut().zip(&g_bce).zip(&g_contour) {
        *g = w.lambda_bce * a + w.lambda_contour * b;
    }

    if let Some(gt) = inputs.gt {
        let (pj, rj) = (inputs.prelim_joints, inputs.refined_joints);
        let (pv, rv) = (inputs.prelim_vertices, inputs.refined_vertices);
        let pose = pose_loss_grad(&gt.joints, pj, rj)?;
        let mesh = mesh_loss_grad(&gt.vertices, pv, rv)?;
        out.pose = pose.value;
        out.mesh = mesh.value;
        axpy(&mut grads.prelim_joints, w.lambda_j, &pose.prelim);
        axpy(&mut grads.refined_joints, w.lambda_j, &pose.refined);
        axpy(&mut grads.prelim_vertices, w.lambda_v, &mesh.prelim);
        axpy(&mut grads.refined_vertices, w.lambda_v, &mesh.refined);
        // Alignment is skipped when its weight is zero; the term is still
        // reported when it can be computed.
        match aligned_pose_loss_grad(&gt.joints, pj, rj, inputs.pa_variant) {
            Ok(ap) => {
                out.aligned_pose = ap.value;
                axpy(&mut grads.prelim_joints, w.lambda_align_j, &ap.prelim);
                axpy(&mut grads.refined_joints, w.lambda_align_j, &ap.refined);
            }
            Err(e) if w.lambda_align_j > 0.0 => return Err(e),
            Err(_) => {}
        }
        match aligned_mesh_loss_grad(&gt.vertices, pv, rv, inputs.pa_variant) {
            Ok(am) => {
                out.aligned_mesh = am.value;
                axpy(&mut grads.prelim_vertices, w.lambda_align_v, &am.prelim);
                axpy(&mut grads.refined_vertices, w.lambda_align_v, &am.refined);
            }
            Err(e) if w.lambda_align_v > 0.0 => return Err(e),
            Err(_) => {}
        }
    }
    out.total = out.weighted_total(&w);
    out.check_finite()?;
    Ok((out, grads))
}
