//! Synthetic dataset generation: random hand parameters rendered to hard
//! masks, with ground-truth joints and vertices and optional multi-view
//! emission.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::Camera;
use crate::diff_engine::Target;
use crate::error::{Error, Result};
use crate::hand_model::{axis_angle_from_matrix, pose_mesh, rodrigues, HandMesh, HandModel, HandParams, Joints};
use crate::image_ops::distance_field_of_mask;
use crate::losses::GroundTruth;
use crate::math::{self, Vec3};
use crate::par;
use crate::render::render_hard;
use crate::silhouette::SilhouetteImage;

pub const MANIFEST_VERSION: u64 = 1;
/// Yaw angles (degrees) of the five default views.
pub const DEFAULT_VIEW_YAWS: [f64; 5] = [-60.0, -30.0, 0.0, 30.0, 60.0];
/// Samples whose posed mesh comes closer to the camera plane than this are
/// redrawn.
pub const MIN_DEPTH: f64 = 0.05;
const MAX_RESAMPLES: usize = 1000;

/// Sampling ranges: `θ ~ U[-theta, theta)`, each rotation axis
/// `~ U[-rotation, rotation)`; β is zero and T fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleRanges {
    pub theta: f64,
    pub rotation: f64,
    pub translation: [f64; 3],
}

impl Default for SampleRanges {
    fn default() -> Self {
        Self {
            theta: 2.0,
            rotation: std::f64::consts::PI,
            translation: [0.0, 0.0, 0.5],
        }
    }
}

/// Draws parameters with the default ranges.
pub fn sample_params(rng: &mut impl Rng, n_pc: usize) -> HandParams {
    sample_params_in(rng, n_pc, &SampleRanges::default())
}

pub fn sample_params_in(rng: &mut impl Rng, n_pc: usize, ranges: &SampleRanges) -> HandParams {
    let mut p = HandParams::zeros(n_pc);
    for t in &mut p.theta {
        *t = rng.random_range(-ranges.theta..ranges.theta);
    }
    for r in &mut p.rotation {
        *r = rng.random_range(-ranges.rotation..ranges.rotation);
    }
    p.translation = ranges.translation;
    p
}

/// Parameters of the same hand seen after a rotation of `yaw_deg` about the
/// camera's vertical axis, pivoting at the wrist.
pub fn view_params(params: &HandParams, yaw_deg: f64) -> HandParams {
    if yaw_deg == 0.0 {
        return params.clone();
    }
    let ry = rodrigues([0.0, yaw_deg.to_radians(), 0.0]);
    let r = math::mat_mul(&ry, &rodrigues(params.rotation));
    HandParams {
        rotation: axis_angle_from_matrix(&r),
        ..params.clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub camera: Camera,
    /// Yaw angles in degrees; one view per entry.
    pub view_yaws: Vec<f64>,
    pub ranges: SampleRanges,
}

impl SynthConfig {
    /// Single-view configuration with the default camera for `size`.
    pub fn new(count: usize, seed: u64, width: u32, height: u32) -> Self {
        Self {
            count,
            seed,
            camera: Camera::default_for_size(width, height),
            view_yaws: vec![0.0],
            ranges: SampleRanges::default(),
        }
    }

    /// `views = 1` is the frontal view only; `views = 5` the default set;
    /// other counts spread evenly over ±60°.
    pub fn with_views(mut self, views: usize) -> Result<Self> {
        self.view_yaws = match views {
            0 => return Err(Error::Config("views must be at least 1".into())),
            1 => vec![0.0],
            5 => DEFAULT_VIEW_YAWS.to_vec(),
            n => (0..n).map(|i| -60.0 + 120.0 * i as f64 / (n - 1) as f64).collect(),
        };
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: usize,
    pub view_index: usize,
    pub params: HandParams,
    pub mask: SilhouetteImage,
    pub joints_gt: Joints,
    pub mesh_gt: HandMesh,
    pub camera: Camera,
}

impl SyntheticSample {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            joints: self.joints_gt.positions.clone(),
            vertices: self.mesh_gt.vertices.clone(),
        }
    }

    pub fn gt_file(&self) -> GtFile {
        GtFile {
            id: self.id,
            view: self.view_index,
            theta: self.params.theta.clone(),
            beta: self.params.beta.clone(),
            rotation: self.params.rotation,
            translation: self.params.translation,
            joints: self.joints_gt.positions.clone(),
            vertices: self.mesh_gt.vertices.clone(),
        }
    }
}

/// Ground-truth JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtFile {
    pub id: usize,
    pub view: usize,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub joints: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
}

impl GtFile {
    pub fn params(&self) -> HandParams {
        HandParams {
            theta: self.theta.clone(),
            beta: self.beta.clone(),
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            joints: self.joints.clone(),
            vertices: self.vertices.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            field: format!("ground truth {}", path.display()),
            msg: e.to_string(),
        })
    }
}

fn render_views(model: &HandModel, cfg: &SynthConfig, id: usize, base: &HandParams) -> Result<Option<Vec<SyntheticSample>>> {
    let mut out = Vec::with_capacity(cfg.view_yaws.len());
    for (view, &yaw) in cfg.view_yaws.iter().enumerate() {
        let params = view_params(base, yaw);
        let (mesh, joints) = pose_mesh(model, &params)?;
        if mesh.vertices.iter().any(|v| !(v[2] > MIN_DEPTH)) {
            return Ok(None);
        }
        let mask = render_hard(&cfg.camera, &mesh.vertices, model.faces());
        if mask.count_foreground() == 0 {
            return Ok(None);
        }
        out.push(SyntheticSample {
            id,
            view_index: view,
            params,
            mask,
            joints_gt: joints,
            mesh_gt: mesh,
            camera: cfg.camera,
        });
    }
    Ok(Some(out))
}

/// Generates all samples in memory. Sample `id` draws from stream `id` of a
/// ChaCha8 generator seeded with `cfg.seed`, so samples are independent of
/// each other and of the thread count. Returns the samples (id-major, then
/// view) and the number of redraws.
pub fn generate_samples(model: &HandModel, cfg: &SynthConfig) -> Result<(Vec<SyntheticSample>, usize)> {
    cfg.camera.validate()?;
    if cfg.view_yaws.is_empty() {
        return Err(Error::Config("at least one view is required".into()));
    }
    let per_id: Vec<Result<(Vec<SyntheticSample>, usize)>> = par::map_range(cfg.count, |id| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64);
        for attempt in 0..MAX_RESAMPLES {
            let base = sample_params_in(&mut rng, model.n_pc(), &cfg.ranges);
            if let Some(views) = render_views(model, cfg, id, &base)? {
                return Ok((views, attempt));
            }
        }
        Err(Error::Degenerate(format!(
            "sample {id}: no visible hand after {MAX_RESAMPLES} draws"
        )))
    });
    let mut samples = Vec::new();
    let mut resampled = 0;
    for r in per_id {
        let (s, n) = r?;
        if n > 0 {
            log::info!("sample {}: redrew parameters {n} time(s)", s[0].id);
        }
        samples.extend(s);
        resampled += n;
    }
    Ok((samples, resampled))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub view: usize,
    pub mask: String,
    pub dfield: String,
    pub gt: String,
    pub mask_sha256: String,
    pub dfield_sha256: String,
    pub gt_sha256: String,
}

/// Dataset index written last by [`generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u64,
    pub seed: u64,
    pub model_sha256: String,
    pub camera: Camera,
    pub view_yaws: Vec<f64>,
    pub ranges: SampleRanges,
    pub resampled: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(Self::FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            field: "manifest".into(),
            msg: e.to_string(),
        })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    /// Checks that every listed file exists and matches its hash.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for e in &self.samples {
            for (name, hash) in [(&e.mask, &e.mask_sha256), (&e.dfield, &e.dfield_sha256), (&e.gt, &e.gt_sha256)] {
                let path = dir.join(name);
                let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
                if &sha256_hex(&bytes) != hash {
                    return Err(Error::invariant(name, "hash does not match the manifest"));
                }
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// File stem of a sample: `sample_00012_v3`.
pub fn sample_stem(id: usize, view: usize) -> String {
    format!("sample_{id:05}_v{view}")
}

/// Generates the dataset into `out_dir`: per sample a mask PNG, a
/// `.dfield` cache and a ground-truth JSON, plus `camera.json` and
/// `manifest.json` (written last).
pub fn generate(model: &HandModel, cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (samples, resampled) = generate_samples(model, cfg)?;
    let entries: Vec<Result<ManifestEntry>> = par::map_range(samples.len(), |i| {
        let s = &samples[i];
        let stem = sample_stem(s.id, s.view_index);
        let mask_bytes = s.mask.to_png_bytes();
        let dfield_bytes = distance_field_of_mask(&s.mask)?.to_bytes();
        let mut gt_bytes = serde_json::to_vec_pretty(&s.gt_file()).expect("ground truth serializes");
        gt_bytes.push(b'\n');
        let entry = ManifestEntry {
            id: s.id,
            view: s.view_index,
            mask: format!("{stem}.png"),
            dfield: format!("{stem}.dfield"),
            gt: format!("{stem}.json"),
            mask_sha256: sha256_hex(&mask_bytes),
            dfield_sha256: sha256_hex(&dfield_bytes),
            gt_sha256: sha256_hex(&gt_bytes),
        };
        write(&out_dir.join(&entry.mask), &mask_bytes)?;
        write(&out_dir.join(&entry.dfield), &dfield_bytes)?;
        write(&out_dir.join(&entry.gt), &gt_bytes)?;
        Ok(entry)
    });
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed: cfg.seed,
        model_sha256: model.sha256(),
        camera: cfg.camera,
        view_yaws: cfg.view_yaws.clone(),
        ranges: cfg.ranges,
        resampled,
        samples: entries.into_iter().collect::<Result<_>>()?,
    };
    cfg.camera.save(out_dir.join("camera.json"))?;
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write(&out_dir.join(Manifest::FILE_NAME), &bytes)?;
    Ok(manifest)
}

/// Paths of one emitted sample.
pub fn entry_paths(dir: &Path, entry: &ManifestEntry) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(&entry.mask), dir.join(&entry.dfield), dir.join(&entry.gt))
}

/// A seeded evaluation point for gradient checks: a target rendered from
/// ground-truth parameters, and nearby parameters to differentiate at.
#[derive(Debug, Clone)]
pub struct Scene {
    pub camera: Camera,
    pub target: Target,
    pub gt: GroundTruth,
    pub gt_params: HandParams,
    pub params: HandParams,
}

/// Builds a [`Scene`] at `size`×`size` pixels: θ ~ U[-1, 1), rotation
/// ~ U[-π/6, π/6), evaluated at a perturbation of every parameter
/// (including β).
pub fn random_scene(model: &HandModel, seed: u64, size: u32) -> Result<Scene> {
    let camera = Camera::default_for_size(size, size);
    let ranges = SampleRanges {
        theta: 1.0,
        rotation: std::f64::consts::FRAC_PI_6,
        ..SampleRanges::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt_params = sample_params_in(&mut rng, model.n_pc(), &ranges);
    let (mesh, joints) = pose_mesh(model, &gt_params)?;
    let target = Target::from_mask(render_hard(&camera, &mesh.vertices, model.faces()))?;
    let mut params = gt_params.clone();
    for t in &mut params.theta {
        *t += rng.random_range(-0.3..0.3);
    }
    for b in &mut params.beta {
        *b += rng.random_range(-0.3..0.3);
    }
    for r in &mut params.rotation {
        *r += rng.random_range(-0.1..0.1);
    }
    for t in &mut params.translation {
        *t += rng.random_range(-0.01..0.01);
    }
    Ok(Scene {
        camera,
        target,
        gt: GroundTruth {
            joints: joints.positions,
            vertices: mesh.vertices,
        },
        gt_params,
        params,
    })
}
