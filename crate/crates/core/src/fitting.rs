//! Two-stage multi-restart fit: stage 1 optimizes hand parameters, stage 2
//! optimizes per-vertex offsets added to the stage-1 mesh.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::PaVariant;
use crate::camera::Camera;
use crate::diff_engine::{Evaluation, Objective, Target, Wrt};
use crate::error::{Error, Result};
use crate::hand_model::{HandMesh, HandModel, HandParams, Joints};
use crate::image_ops::write_f32_grid;
use crate::losses::{GroundTruth, LossBreakdown, LossWeights, Supervision};
use crate::math::Vec3;
use crate::metrics::{evaluate, MetricReport, MetricSample};
use crate::optim::{AdamConfig, AdamState};
use crate::par;
use crate::render::{render_hard, render_soft_with_cache, SoftRasterSettings};
use crate::silhouette::SilhouetteImage;

/// Fitting hyper-parameters. Every field has a default, so a config file
/// only needs the fields it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations_stage1: usize,
    pub iterations_stage2: usize,
    /// Adam step size for stage 1 (θ, β, rotation).
    pub learning_rate: f64,
    /// Stage-1 step size for the translation (metres); `None` uses
    /// `learning_rate`.
    pub learning_rate_translation: Option<f64>,
    /// Adam step size for stage 2 (vertex offsets, metres).
    pub learning_rate_stage2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub restarts: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub mode: Supervision,
    pub offset_reg: f64,
    pub offset_l2: f64,
    /// Prior weight on `‖θ‖² + ‖β‖²`; `None` uses the mode default.
    pub prior_weight: Option<f64>,
    /// Soft-rasterizer σ in pixels²; `None` uses the camera default.
    pub sigma: Option<f64>,
    pub border_band: usize,
    pub pa_variant: PaVariant,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations_stage1: 400,
            iterations_stage2: 200,
            learning_rate: 1e-4,
            learning_rate_translation: None,
            learning_rate_stage2: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            restarts: 3,
            seed: 0,
            weights: LossWeights::default(),
            mode: Supervision::Full,
            offset_reg: 1.0,
            offset_l2: 0.1,
            prior_weight: None,
            sigma: None,
            border_band: 0,
            pa_variant: PaVariant::Literal,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam(self.learning_rate).validate()?;
        self.adam(self.learning_rate_stage2).validate()?;
        if let Some(lr) = self.learning_rate_translation {
            self.adam(lr).validate()?;
        }
        self.weights.validate()?;
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        for (name, v) in [("offset_reg", self.offset_reg), ("offset_l2", self.offset_l2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if let Some(p) = self.prior_weight {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("prior_weight must be finite and ≥ 0, got {p}")));
            }
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Parses JSON, or TOML when `toml` is set.
    pub fn parse(text: &str, toml: bool) -> Result<Self> {
        let cfg: Self = if toml {
            toml::from_str(text).map_err(|e| Error::Parse {
                field: "fit config".into(),
                msg: e.to_string(),
            })?
        } else {
            serde_json::from_str(text).map_err(|e| Error::Parse {
                field: "fit config".into(),
                msg: e.to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; `.toml` files are read as TOML, anything else
    /// as JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "toml"))
    }

    /// The objective a fit with this config minimizes.
    pub fn objective<'a>(
        &self,
        model: &'a HandModel,
        camera: &'a Camera,
        target: &'a Target,
        gt: Option<&'a GroundTruth>,
    ) -> Result<Objective<'a>> {
        let mut obj = Objective::new(model, camera, target, gt, self.mode)?;
        obj.weights = self.weights;
        obj.offset_reg = self.offset_reg;
        obj.offset_l2 = self.offset_l2;
        obj.border_band = self.border_band;
        obj.pa_variant = self.pa_variant;
        if let Some(p) = self.prior_weight {
            obj.prior_weight = p;
        }
        if let Some(s) = self.sigma {
            obj.raster = SoftRasterSettings::with_sigma(s);
        }
        Ok(obj)
    }
}

/// Translation that puts the center of the template's bounding box on the
/// ray through the mask's bounding-box center, at the depth where its x–y extent matches
/// the box diagonal.
fn placement(model: &HandModel, camera: &Camera, mask: &SilhouetteImage) -> Result<[f64; 3]> {
    let (x0, y0, x1, y1) = mask.bounding_box().ok_or(Error::EmptyContour)?;
    let verts = model.template_vertices();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in verts {
        for c in 0..3 {
            lo[c] = lo[c].min(v[c]);
            hi[c] = hi[c].max(v[c]);
        }
    }
    let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let extent = (hi[0] - lo[0]).hypot(hi[1] - lo[1]);
    let box_w = (x1 - x0 + 1) as f64;
    let box_h = (y1 - y0 + 1) as f64;
    let f = 0.5 * (camera.fx + camera.fy);
    let z = (f * extent / box_w.hypot(box_h)).max(10.0 * crate::synth::MIN_DEPTH);
    let center = [0.5 * (x0 + x1 + 1) as f64, 0.5 * (y0 + y1 + 1) as f64];
    let p = camera.unproject(center, z);
    Ok([p[0] - mid[0], p[1] - mid[1], z - mid[2]])
}

/// Initial parameters of restart `restart`: restart 0 is the rest pose
/// placed over the mask; later restarts add seeded noise
/// `θ ~ U[-0.5, 0.5)`, rotation `~ U[-π/4, π/4)` per axis.
pub fn init_params(
    model: &HandModel,
    camera: &Camera,
    mask: &SilhouetteImage,
    restart: usize,
    seed: u64,
) -> Result<HandParams> {
    let mut p = HandParams::zeros(model.n_pc());
    p.translation = placement(model, camera, mask)?;
    if restart > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        for t in &mut p.theta {
            *t = rng.random_range(-0.5..0.5);
        }
        let r = std::f64::consts::FRAC_PI_4;
        for a in &mut p.rotation {
            *a = rng.random_range(-r..r);
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: u8,
    pub iteration: usize,
    pub loss: LossBreakdown,
}

/// Outcome of a single restart.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartResult {
    pub restart: usize,
    pub params: HandParams,
    pub offsets: Vec<Vec3>,
    pub loss_trace: Vec<TraceEntry>,
    pub final_loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: HandParams,
    pub offsets: Vec<Vec3>,
    pub prelim: HandMesh,
    pub prelim_joints: Joints,
    pub refined: HandMesh,
    pub refined_joints: Joints,
    pub soft: SilhouetteImage,
    pub hard: SilhouetteImage,
    /// Stage-1 entries (iterations 0..=n1) followed by stage-2 entries
    /// (0..=n2); the last entry of each stage is the loss after its final
    /// update.
    pub loss_trace: Vec<TraceEntry>,
    pub best_restart: usize,
    /// Final total per restart; `None` for restarts that diverged.
    pub restart_totals: Vec<Option<f64>>,
    pub metrics: Option<MetricReport>,
}

fn checked(eval: Evaluation) -> Result<Evaluation> {
    eval.breakdown.check_finite()?;
    Ok(eval)
}

/// Runs both stages for one restart. Independent of every other restart.
pub fn fit_restart(objective: &Objective, mask: &SilhouetteImage, config: &FitConfig, restart: usize) -> Result<RestartResult> {
    let n_pc = objective.model.n_pc();
    let params0 = init_params(objective.model, objective.camera, mask, restart, config.seed)?;
    let mut trace = Vec::with_capacity(config.iterations_stage1 + config.iterations_stage2 + 2);

    let adam1 = config.adam(config.learning_rate);
    let mut x = params0.to_vec();
    let mut state = AdamState::new(x.len());
    let mut rates = vec![config.learning_rate; x.len()];
    let n = rates.len();
    rates[n - 3..].fill(config.learning_rate_translation.unwrap_or(config.learning_rate));
    for it in 0..config.iterations_stage1 {
        let params = HandParams::from_slice(&x, n_pc)?;
        let (eval, grad) = objective.gradient(&params, None, Wrt::Params)?;
        let eval = checked(eval)?;
        trace.push(TraceEntry { stage: 1, iteration: it, loss: eval.breakdown });
        state.step_with_rates(&mut x, &grad.params_vec(), &adam1, &rates)?;
    }
    let params = HandParams::from_slice(&x, n_pc)?;
    let eval = checked(objective.evaluate(&params, None)?)?;
    trace.push(TraceEntry {
        stage: 1,
        iteration: config.iterations_stage1,
        loss: eval.breakdown,
    });

    let adam2 = config.adam(config.learning_rate_stage2);
    let n_vertices = objective.model.template_vertices().len();
    let mut flat = vec![0.0; 3 * n_vertices];
    let mut state = AdamState::new(flat.len());
    let unflatten = |flat: &[f64]| -> Vec<Vec3> { flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
    for it in 0..config.iterations_stage2 {
        let offsets = unflatten(&flat);
        let (eval, grad) = objective.gradient(&params, Some(&offsets), Wrt::Offsets)?;
        let eval = checked(eval)?;
        trace.push(TraceEntry { stage: 2, iteration: it, loss: eval.breakdown });
        let g: Vec<f64> = grad.d_offsets.expect("offset gradient").into_iter().flatten().collect();
        state.step(&mut flat, &g, &adam2, adam2.learning_rate)?;
    }
    let offsets = unflatten(&flat);
    let eval = checked(objective.evaluate(&params, Some(&offsets))?)?;
    trace.push(TraceEntry {
        stage: 2,
        iteration: config.iterations_stage2,
        loss: eval.breakdown,
    });
    Ok(RestartResult {
        restart,
        params,
        offsets,
        loss_trace: trace,
        final_loss: eval.breakdown,
    })
}

/// Fits `model` to a binary `mask`. Restarts run on the current thread
/// pool; the restart with the lowest final total wins (ties go to the lower
/// index). A restart whose loss or gradient turns non-finite is dropped;
/// the fit fails only if every restart does.
pub fn fit(
    model: &HandModel,
    camera: &Camera,
    mask: &SilhouetteImage,
    config: &FitConfig,
    gt: Option<&GroundTruth>,
) -> Result<FitResult> {
    config.validate()?;
    let target = Target::from_mask(mask.clone())?;
    let objective = config.objective(model, camera, &target, gt)?;
    let outcomes = par::map_range(config.restarts, |r| fit_restart(&objective, &target.mask, config, r));
    let mut restart_totals = Vec::with_capacity(outcomes.len());
    let mut best: Option<RestartResult> = None;
    let mut last_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(r) => {
                restart_totals.push(Some(r.final_loss.total));
                if best.as_ref().is_none_or(|b| r.final_loss.total < b.final_loss.total) {
                    best = Some(r);
                }
            }
            Err(e) => {
                log::warn!("restart {} abandoned: {e}", restart_totals.len());
                restart_totals.push(None);
                last_error = Some(e);
            }
        }
    }
    let best = match best {
        Some(b) => b,
        None => return Err(last_error.expect("at least one restart")),
    };
    log::info!("best restart {} with total {:.6e}", best.restart, best.final_loss.total);
    finish(&objective, config, best, restart_totals)
}

fn finish(objective: &Objective, config: &FitConfig, best: RestartResult, restart_totals: Vec<Option<f64>>) -> Result<FitResult> {
    let eval = objective.evaluate(&best.params, Some(&best.offsets))?;
    let faces = objective.model.faces();
    let soft = render_soft_with_cache(objective.camera, &eval.refined.vertices, faces, objective.raster).image;
    let hard = render_hard(objective.camera, &eval.refined.vertices, faces);
    let metrics = match objective.gt {
        Some(gt) => {
            let truth = MetricSample {
                id: "fit".into(),
                joints: gt.joints.clone(),
                vertices: gt.vertices.clone(),
                mask: Some(objective.target.mask.clone()),
            };
            let pred = MetricSample {
                id: "fit".into(),
                joints: eval.refined_joints.positions.clone(),
                vertices: eval.refined.vertices.clone(),
                mask: Some(hard.clone()),
            };
            Some(evaluate(&[truth], &[pred], config.pa_variant)?)
        }
        None => None,
    };
    Ok(FitResult {
        params: best.params,
        offsets: best.offsets,
        prelim: eval.prelim,
        prelim_joints: eval.prelim_joints,
        refined: eval.refined,
        refined_joints: eval.refined_joints,
        soft,
        hard,
        loss_trace: best.loss_trace,
        best_restart: best.restart,
        restart_totals,
        metrics,
    })
}

/// Wavefront OBJ text with 1-based faces.
pub fn obj_text(vertices: &[Vec3], faces: &[[u32; 3]]) -> String {
    let mut s = String::with_capacity(40 * (vertices.len() + faces.len()));
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// `stage,iteration,<terms...>,total`, one row per trace entry.
pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut s = format!("stage,iteration,{}\n", LossBreakdown::COLUMNS.join(","));
    for e in trace {
        let values: Vec<String> = e.loss.values().iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{},{},{}", e.stage, e.iteration, values.join(","));
    }
    s
}

/// Contents of `prediction.json`: what `eval` consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    /// Stem of the mask this prediction was fitted to.
    pub id: String,
    pub best_restart: usize,
    pub params: HandParams,
    pub joints: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
}

impl PredictionFile {
    pub const FILE_NAME: &'static str = "prediction.json";

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            field: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(value).expect("serializable");
    b.push(b'\n');
    b
}

impl FitResult {
    /// Writes `params.json`, `offsets.dfield` (3 × V f32 grid),
    /// `prelim.obj`, `refined.obj`, `soft.png`, `hard.png`,
    /// `loss_trace.csv`, `prediction.json` and, with ground truth,
    /// `metrics.json`.
    pub fn write(&self, dir: impl AsRef<Path>, model: &HandModel, id: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("params.json"), &json_bytes(&self.params))?;
        let flat: Vec<f64> = self.offsets.iter().flatten().copied().collect();
        write_file(&dir.join("offsets.dfield"), &write_f32_grid(3, self.offsets.len(), &flat))?;
        write_file(&dir.join("prelim.obj"), obj_text(&self.prelim.vertices, model.faces()).as_bytes())?;
        write_file(&dir.join("refined.obj"), obj_text(&self.refined.vertices, model.faces()).as_bytes())?;
        self.soft.save_png(dir.join("soft.png"))?;
        self.hard.save_png(dir.join("hard.png"))?;
        write_file(&dir.join("loss_trace.csv"), trace_csv(&self.loss_trace).as_bytes())?;
        let prediction = PredictionFile {
            id: id.to_string(),
            best_restart: self.best_restart,
            params: self.params.clone(),
            joints: self.refined_joints.positions.clone(),
            vertices: self.refined.vertices.clone(),
        };
        write_file(&dir.join(PredictionFile::FILE_NAME), &json_bytes(&prediction))?;
        if let Some(m) = &self.metrics {
            write_file(&dir.join("metrics.json"), &json_bytes(m))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand_model::pose_mesh;
    use crate::stylized::make_stylized_hand;

    fn scene() -> (HandModel, Camera, SilhouetteImage) {
        let model = make_stylized_hand(6);
        let camera = Camera::default_for_size(48, 48);
        let mut p = HandParams::zeros(6);
        p.translation = [0.0, 0.0, 0.5];
        let (mesh, _) = pose_mesh(&model, &p).unwrap();
        let mask = render_hard(&camera, &mesh.vertices, model.faces());
        (model, camera, mask)
    }

    #[test]
    fn init_examples() {
        let (model, camera, mask) = scene();
        let p0 = init_params(&model, &camera, &mask, 0, 7).unwrap();
        assert!(p0.theta.iter().all(|&t| t == 0.0));
        assert_eq!(p0.rotation, [0.0; 3]);
        assert!(p0.translation[2] > 0.0);
        assert_eq!(init_params(&model, &camera, &mask, 2, 7).unwrap(), init_params(&model, &camera, &mask, 2, 7).unwrap());
        let p1 = init_params(&model, &camera, &mask, 1, 7).unwrap();
        let p2 = init_params(&model, &camera, &mask, 2, 7).unwrap();
        assert!(p1.theta.iter().zip(&p2.theta).any(|(a, b)| a != b));
        assert!(p1.theta.iter().all(|t| (-0.5..0.5).contains(t)));
        assert!(p1.rotation.iter().all(|r| r.abs() <= std::f64::consts::FRAC_PI_4));
        let empty = SilhouetteImage::zeros(48, 48, crate::silhouette::SilhouetteKind::Hard);
        assert!(matches!(init_params(&model, &camera, &empty, 0, 7), Err(Error::EmptyContour)));
    }

    #[test]
    fn init_places_template_over_mask() {
        let (model, camera, mask) = scene();
        let p0 = init_params(&model, &camera, &mask, 0, 0).unwrap();
        let (mesh, _) = pose_mesh(&model, &p0).unwrap();
        let placed = render_hard(&camera, &mesh.vertices, model.faces());
        let (iou, _) = crate::metrics::iou_dice(&placed, &mask).unwrap();
        assert!(iou > 0.8, "{iou} {:?}", p0.translation);
    }

    #[test]
    fn config_parsing() {
        let cfg = FitConfig::parse(r#"{"restarts": 2, "weights": {"lambda_bce": 1.0}}"#, false).unwrap();
        assert_eq!(cfg.restarts, 2);
        assert_eq!(cfg.weights.lambda_bce, 1.0);
        assert_eq!(cfg.iterations_stage1, 400);
        let cfg = FitConfig::parse("iterations_stage2 = 5\nmode = \"silhouette_only\"\n", true).unwrap();
        assert_eq!(cfg.iterations_stage2, 5);
        assert_eq!(cfg.mode, Supervision::SilhouetteOnly);
        assert!(FitConfig::parse(r#"{"restarts": 0}"#, false).is_err());
        assert!(FitConfig::parse(r#"{"learning_rate": -1}"#, false).is_err());
        assert!(FitConfig::parse(r#"{"bogus": 1}"#, false).is_err());
    }

    #[test]
    fn zero_iterations_returns_init_state() {
        let (model, camera, mask) = scene();
        let cfg = FitConfig {
            iterations_stage1: 0,
            iterations_stage2: 0,
            restarts: 1,
            mode: Supervision::SilhouetteOnly,
            ..FitConfig::default()
        };
        let r = fit(&model, &camera, &mask, &cfg, None).unwrap();
        assert_eq!(r.params, init_params(&model, &camera, &mask, 0, cfg.seed).unwrap());
        assert!(r.offsets.iter().all(|o| *o == [0.0; 3]));
        assert_eq!(r.loss_trace.len(), 2);
        assert!(r.metrics.is_none());
    }

    #[test]
    fn obj_and_csv_text() {
        let obj = obj_text(&[[0.0, 1.0, 2.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.5]], &[[0, 1, 2]]);
        assert_eq!(obj, "v 0 1 2\nv 1 0 0\nv 0 0 1.5\nf 1 2 3\n");
        let csv = trace_csv(&[TraceEntry {
            stage: 1,
            iteration: 0,
            loss: LossBreakdown::default(),
        }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("stage,iteration,pose,"));
        assert!(lines[0].ends_with(",total"));
        assert_eq!(lines[1].split(',').count(), 12);
    }
}
