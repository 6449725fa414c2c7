//! Exact gradients of the full objective with respect to the hand
//! parameters and per-vertex offsets.
//!
//! Parameters go through forward-mode duals (the vertex Jacobian); the
//! renderer, image ops, alignment and losses each supply a reverse pass.
//! Chain:
//!
//! ```text
//! g_refined_v = render_adjoint + mesh terms + Rᵀ g_refined_joints
//! g_prelim_v  = mesh terms + Rᵀ g_prelim_joints
//! g_offsets   = g_refined_v + regularizers
//! g_params    = Jacᵀ (g_prelim_v + g_refined_v) + prior
//! ```

use serde::Serialize;

use crate::alignment::PaVariant;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::hand_model::{self, HandMesh, HandModel, HandParams, Joints, NUM_SHAPE};
use crate::image_ops::{distance_field_of_mask, DistanceField};
use crate::losses::{total_loss_grad, GroundTruth, LossBreakdown, LossInputs, LossWeights, Supervision};
use crate::math::{self, Vec3};
use crate::render::{render_soft_with_cache, SoftRasterSettings};
use crate::silhouette::SilhouetteImage;

/// Prior weight on `‖θ‖² + ‖β‖²` used in silhouette-only mode.
pub const SILHOUETTE_PRIOR: f64 = 1e-3;

/// Target mask with its precomputed distance field.
#[derive(Debug, Clone)]
pub struct Target {
    pub mask: SilhouetteImage,
    pub dfield: DistanceField,
}

impl Target {
    /// Errors with [`Error::EmptyContour`] when the mask is empty.
    pub fn from_mask(mask: SilhouetteImage) -> Result<Self> {
        let mask = mask.threshold(0.5);
        let dfield = distance_field_of_mask(&mask)?;
        Ok(Self { mask, dfield })
    }

    pub fn with_dfield(mask: SilhouetteImage, dfield: DistanceField) -> Result<Self> {
        if mask.width() != dfield.width() || mask.height() != dfield.height() {
            return Err(Error::dim(
                "dfield",
                format!("{}x{}", mask.width(), mask.height()),
                format!("{}x{}", dfield.width(), dfield.height()),
            ));
        }
        Ok(Self {
            mask: mask.threshold(0.5),
            dfield,
        })
    }
}

/// Vertex adjacency for the offset smoothness term `oᵀ L o`.
#[derive(Debug, Clone)]
pub struct MeshGraph {
    neighbors: Vec<Vec<usize>>,
}

impl MeshGraph {
    pub fn from_faces(num_vertices: usize, faces: &[[u32; 3]]) -> Self {
        let mut neighbors = vec![Vec::new(); num_vertices];
        for f in faces {
            for k in 0..3 {
                let a = f[k] as usize;
                let b = f[(k + 1) % 3] as usize;
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Self { neighbors }
    }

    /// `Σ_{edges (i,j)} ‖x_i − x_j‖²`.
    pub fn edge_energy(&self, x: &[Vec3]) -> f64 {
        let mut e = 0.0;
        for (i, n) in self.neighbors.iter().enumerate() {
            for &j in n.iter().filter(|&&j| j > i) {
                let d = math::sub(x[i], x[j]);
                e += math::dot(d, d);
            }
        }
        e
    }

    /// `scale · ∇ edge_energy(x)`, i.e. `2·scale·L x` with `L` the
    /// combinatorial graph Laplacian.
    pub fn edge_energy_grad(&self, x: &[Vec3], scale: f64) -> Vec<Vec3> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let mut g = [0.0; 3];
                for &j in n {
                    g = math::add(g, math::sub(x[i], x[j]));
                }
                math::scale(g, 2.0 * scale)
            })
            .collect()
    }
}

/// Everything fixed during one fit: model, camera, target and weights.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub model: &'a HandModel,
    pub camera: &'a Camera,
    pub target: &'a Target,
    pub gt: Option<&'a GroundTruth>,
    pub weights: LossWeights,
    pub mode: Supervision,
    pub raster: SoftRasterSettings,
    pub border_band: usize,
    pub pa_variant: PaVariant,
    /// Weight on `‖θ‖² + ‖β‖²`.
    pub prior_weight: f64,
    /// Weight on the Laplacian smoothness energy `Σ_{edges} ‖o_i − o_j‖² / V`.
    pub offset_reg: f64,
    /// Weight on the mean squared offset.
    pub offset_l2: f64,
    graph: MeshGraph,
}

/// Outputs of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub prelim: HandMesh,
    pub prelim_joints: Joints,
    pub refined: HandMesh,
    pub refined_joints: Joints,
    pub rendered: SilhouetteImage,
}

/// Gradient of the total loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gradient {
    pub d_theta: Vec<f64>,
    pub d_beta: Vec<f64>,
    pub d_rotation: [f64; 3],
    pub d_translation: [f64; 3],
    pub d_offsets: Option<Vec<Vec3>>,
}

impl Gradient {
    /// Parameter part in flattened order.
    pub fn params_vec(&self) -> Vec<f64> {
        let mut v = self.d_theta.clone();
        v.extend_from_slice(&self.d_beta);
        v.extend_from_slice(&self.d_rotation);
        v.extend_from_slice(&self.d_translation);
        v
    }

    fn from_params_vec(v: &[f64], n_pc: usize, d_offsets: Option<Vec<Vec3>>) -> Self {
        let b = n_pc + NUM_SHAPE;
        Self {
            d_theta: v[..n_pc].to_vec(),
            d_beta: v[n_pc..b].to_vec(),
            d_rotation: [v[b], v[b + 1], v[b + 2]],
            d_translation: [v[b + 3], v[b + 4], v[b + 5]],
            d_offsets,
        }
    }
}

/// Which gradient blocks to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    All,
    Params,
    Offsets,
}

struct VertexGrads {
    prelim: Vec<Vec3>,
    refined: Vec<Vec3>,
}

impl<'a> Objective<'a> {
    /// Objective with default weights; the prior is on only in
    /// silhouette-only mode.
    pub fn new(
        model: &'a HandModel,
        camera: &'a Camera,
        target: &'a Target,
        gt: Option<&'a GroundTruth>,
        mode: Supervision,
    ) -> Result<Self> {
        camera.validate()?;
        if target.mask.width() != camera.width as usize || target.mask.height() != camera.height as usize {
            return Err(Error::dim(
                "target mask",
                format!("{}x{}", camera.width, camera.height),
                format!("{}x{}", target.mask.width(), target.mask.height()),
            ));
        }
        if mode == Supervision::Full && gt.is_none() {
            return Err(Error::MissingGroundTruth);
        }
        Ok(Self {
            model,
            camera,
            target,
            gt,
            weights: LossWeights::default(),
            mode,
            raster: SoftRasterSettings::for_camera(camera),
            border_band: 0,
            pa_variant: PaVariant::Literal,
            prior_weight: if mode == Supervision::SilhouetteOnly { SILHOUETTE_PRIOR } else { 0.0 },
            offset_reg: 1.0,
            offset_l2: 0.1,
            graph: MeshGraph::from_faces(model.template_vertices().len(), model.faces()),
        })
    }

    pub fn graph(&self) -> &MeshGraph {
        &self.graph
    }

    /// Loss and intermediate outputs, without gradients.
    pub fn evaluate(&self, params: &HandParams, offsets: Option<&[Vec3]>) -> Result<Evaluation> {
        let (prelim, _) = hand_model::pose_mesh(self.model, params)?;
        Ok(self.evaluate_from_prelim(params, prelim.vertices, offsets, false)?.0)
    }

    /// Loss plus gradient blocks selected by `wrt`. Blocks not requested
    /// are returned as zeros / `None`.
    pub fn gradient(&self, params: &HandParams, offsets: Option<&[Vec3]>, wrt: Wrt) -> Result<(Evaluation, Gradient)> {
        let n_pc = self.model.n_pc();
        let (prelim_vertices, jac) = if wrt == Wrt::Offsets {
            (hand_model::pose_mesh(self.model, params)?.0.vertices, None)
        } else {
            let jac = hand_model::pose_jacobian(self.model, params)?;
            (jac.vertices.clone(), Some(jac))
        };
        let (eval, vg) = self.evaluate_from_prelim(params, prelim_vertices, offsets, true)?;
        let vg = vg.expect("requested gradients");
        let mut d_params = vec![0.0; params.len()];
        if let Some(jac) = jac {
            let combined: Vec<Vec3> = vg.prelim.iter().zip(&vg.refined).map(|(a, b)| math::add(*a, *b)).collect();
            d_params = jac.transpose_apply(&combined);
            for (i, t) in params.theta.iter().enumerate() {
                d_params[i] += 2.0 * self.prior_weight * t;
            }
            for (i, b) in params.beta.iter().enumerate() {
                d_params[n_pc + i] += 2.0 * self.prior_weight * b;
            }
        }
        let d_offsets = match (offsets, wrt) {
            (Some(o), Wrt::All | Wrt::Offsets) => {
                let mut g = vg.refined;
                let (_, _, reg) = self.offset_regularizers(o, true);
                for (a, b) in g.iter_mut().zip(reg.expect("requested")) {
                    *a = math::add(*a, b);
                }
                Some(g)
            }
            _ => None,
        };
        Ok((eval, Gradient::from_params_vec(&d_params, n_pc, d_offsets)))
    }

    /// Weighted smoothness and L2 terms on the offsets, optionally with
    /// their gradient.
    fn offset_regularizers(&self, offsets: &[Vec3], want_grad: bool) -> (f64, f64, Option<Vec<Vec3>>) {
        let m = offsets.len() as f64;
        let smooth = self.offset_reg * self.graph.edge_energy(offsets) / m;
        let l2 = self.offset_l2 * offsets.iter().map(|v| math::dot(*v, *v)).sum::<f64>() / m;
        let grad = want_grad.then(|| {
            let mut g = self.graph.edge_energy_grad(offsets, self.offset_reg / m);
            for (gi, o) in g.iter_mut().zip(offsets) {
                *gi = math::add(*gi, math::scale(*o, 2.0 * self.offset_l2 / m));
            }
            g
        });
        (smooth, l2, grad)
    }

    fn evaluate_from_prelim(
        &self,
        params: &HandParams,
        prelim_vertices: Vec<Vec3>,
        offsets: Option<&[Vec3]>,
        want_grad: bool,
    ) -> Result<(Evaluation, Option<VertexGrads>)> {
        let model = self.model;
        let refined_vertices: Vec<Vec3> = match offsets {
            Some(o) => {
                if o.len() != prelim_vertices.len() {
                    return Err(Error::dim("offsets", prelim_vertices.len(), o.len()));
                }
                prelim_vertices.iter().zip(o).map(|(v, d)| math::add(*v, *d)).collect()
            }
            None => prelim_vertices.clone(),
        };
        let prelim = HandMesh {
            vertices: prelim_vertices,
        };
        let refined = HandMesh {
            vertices: refined_vertices,
        };
        let prelim_joints = hand_model::regress_joints(model, &prelim)?;
        let refined_joints = hand_model::regress_joints(model, &refined)?;
        let render = render_soft_with_cache(self.camera, &refined.vertices, model.faces(), self.raster);
        let inputs = LossInputs {
            rendered: &render.image,
            target: &self.target.mask,
            dfield: &self.target.dfield,
            border_band: self.border_band,
            gt: self.gt,
            prelim_joints: &prelim_joints.positions,
            refined_joints: &refined_joints.positions,
            prelim_vertices: &prelim.vertices,
            refined_vertices: &refined.vertices,
            pa_variant: self.pa_variant,
        };
        let (mut breakdown, grads) = total_loss_grad(&self.weights, &inputs, self.mode)?;
        breakdown.prior = self.prior_weight
            * (params.theta.iter().map(|t| t * t).sum::<f64>() + params.beta.iter().map(|b| b * b).sum::<f64>());
        if let Some(o) = offsets {
            let (smooth, l2, _) = self.offset_regularizers(o, false);
            breakdown.offset_smooth = smooth;
            breakdown.offset_l2 = l2;
        }
        breakdown.total = breakdown.weighted_total(&self.weights.effective(self.mode));
        breakdown.check_finite()?;

        let vg = want_grad.then(|| {
            let mut g_refined = render.backward(self.camera, &refined.vertices, &grads.rendered);
            for (a, b) in g_refined.iter_mut().zip(&grads.refined_vertices) {
                *a = math::add(*a, *b);
            }
            hand_model::regress_joints_transpose(model, &grads.refined_joints, &mut g_refined);
            let mut g_prelim = grads.prelim_vertices.clone();
            hand_model::regress_joints_transpose(model, &grads.prelim_joints, &mut g_prelim);
            VertexGrads {
                prelim: g_prelim,
                refined: g_refined,
            }
        });
        let rendered = render.image;
        Ok((
            Evaluation {
                breakdown,
                prelim,
                prelim_joints,
                refined,
                refined_joints,
                rendered,
            },
            vg,
        ))
    }
}

/// Total loss and its gradient with respect to params (and offsets, when
/// given).
pub fn loss_gradient(objective: &Objective, params: &HandParams, offsets: Option<&[Vec3]>) -> Result<(LossBreakdown, Gradient)> {
    let (eval, grad) = objective.gradient(params, offsets, Wrt::All)?;
    Ok((eval.breakdown, grad))
}

/// Central differences of a scalar function.
pub fn finite_diff_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Coordinates with `|analytic|` at or below this are reported but not
/// scored.
pub const FD_SCORE_THRESHOLD: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdRow {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Per-coordinate comparison of analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub h: f64,
    pub rows: Vec<FdRow>,
    /// Max `rel_err` over rows with `|analytic| > FD_SCORE_THRESHOLD`.
    pub max_rel_err: f64,
}

impl FdReport {
    fn from_rows(h: f64, rows: Vec<FdRow>) -> Self {
        let max_rel_err = rows
            .iter()
            .filter(|r| r.analytic.abs() > FD_SCORE_THRESHOLD)
            .map(|r| r.rel_err)
            .fold(0.0, f64::max);
        Self { h, rows, max_rel_err }
    }
}

/// Compares [`loss_gradient`] against central differences with step `h`
/// on every parameter, plus the listed offset coordinates
/// (`(vertex, axis)`) when `offsets` is given.
pub fn finite_diff_check(
    objective: &Objective,
    params: &HandParams,
    offsets: Option<&[Vec3]>,
    h: f64,
    offset_coords: &[(usize, usize)],
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let n_pc = objective.model.n_pc();
    let (_, grad) = loss_gradient(objective, params, offsets)?;
    let flat = params.to_vec();
    let mut failure = None;
    let mut total = |p: &[f64], o: Option<&[Vec3]>| -> f64 {
        let params = HandParams::from_slice(p, n_pc).expect("same length");
        match objective.evaluate(&params, o) {
            Ok(e) => e.breakdown.total,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let numeric = finite_diff_gradient(|p| total(p, offsets), &flat, h);
    let mut rows: Vec<FdRow> = HandParams::names(n_pc)
        .into_iter()
        .zip(grad.params_vec())
        .zip(numeric)
        .map(|((name, analytic), numeric)| FdRow {
            name,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        })
        .collect();
    if let (Some(o), Some(g)) = (offsets, grad.d_offsets.as_ref()) {
        let mut probe = o.to_vec();
        for &(v, c) in offset_coords {
            if v >= o.len() || c >= 3 {
                return Err(Error::invariant("offset_coords", format!("({v}, {c}) out of range")));
            }
            probe[v][c] = o[v][c] + h;
            let plus = total(&flat, Some(&probe));
            probe[v][c] = o[v][c] - h;
            let minus = total(&flat, Some(&probe));
            probe[v][c] = o[v][c];
            let numeric = (plus - minus) / (2.0 * h);
            rows.push(FdRow {
                name: format!("offsets[{v}][{c}]"),
                analytic: g[v][c],
                numeric,
                rel_err: relative_error(g[v][c], numeric),
            });
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(FdReport::from_rows(h, rows))
}
