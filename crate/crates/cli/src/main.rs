use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use silhoufit::alignment::PaVariant;
use silhoufit::camera::Camera;
use silhoufit::diff_engine::{finite_diff_check, Objective, Target};
use silhoufit::fitting::{fit, FitConfig, PredictionFile};
use silhoufit::hand_model::{load_model, pose_mesh, HandModel, HandParams, NUM_SKELETON_JOINTS};
use silhoufit::losses::{GroundTruth, Supervision};
use silhoufit::metrics::{evaluate, MetricSample};
use silhoufit::par;
use silhoufit::render::{render_hard, render_soft};
use silhoufit::silhouette::SilhouetteImage;
use silhoufit::stylized::make_stylized_hand;
use silhoufit::synth::{entry_paths, generate, random_scene, sample_stem, GtFile, Manifest, SynthConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const GRADCHECK_TOLERANCE: f64 = 1e-2;

#[derive(Parser)]
#[command(name = "silhoufit", version, about = "Hand pose and shape recovery from binary silhouettes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset of masks, distance fields and ground truth.
    Synth(SynthArgs),
    /// Fit the hand model to one mask.
    Fit(FitArgs),
    /// Score a directory of predictions against a synthetic dataset.
    Eval(EvalArgs),
    /// Render a silhouette from parameters.
    Render(RenderArgs),
    /// Compare analytic gradients with central differences on a seeded scene.
    Gradcheck(GradcheckArgs),
    /// Print model dimensions and hashes.
    ModelInfo(ModelArg),
}

#[derive(Args)]
struct ModelArg {
    /// Model JSON file, or `stylized` for the built-in procedural hand.
    #[arg(long)]
    model: String,
    /// Pose components of the built-in model.
    #[arg(long, default_value_t = 6)]
    n_pc: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    views: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 128)]
    size: u32,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Silhouette,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// JSON or TOML fit configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth JSON; enables full supervision and metrics.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Defaults to `full` with --gt and `silhouette` without.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Literal,
    Proper,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding prediction.json, directly or in subdirectories.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "literal")]
    pa_variant: VariantArg,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the soft silhouette instead of the hard one.
    #[arg(long)]
    soft: bool,
    /// Blur in squared pixels; defaults to 1e-4·min(W,H)².
    #[arg(long, requires = "soft")]
    sigma: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
}

/// Writes a line to stdout; a closed pipe is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SILHOUFIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

type CliResult<T> = std::result::Result<T, String>;

fn fail(e: impl Display) -> String {
    e.to_string()
}

fn run(command: Command) -> CliResult<ExitCode> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ModelInfo(a) => model_info(a),
    }
}

fn load(arg: &ModelArg) -> CliResult<HandModel> {
    if arg.model == "stylized" {
        if arg.n_pc == 0 {
            return Err("`n_pc` must be at least 1".into());
        }
        Ok(make_stylized_hand(arg.n_pc))
    } else {
        load_model(&arg.model).map_err(fail)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, field: &str) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read `{field}` {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("failed to parse `{field}` {}: {e}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) {
    say!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn synth(a: SynthArgs) -> CliResult<ExitCode> {
    if a.count == 0 {
        return Err("`count` must be at least 1".into());
    }
    if a.size == 0 {
        return Err("`size` must be at least 1".into());
    }
    let model = load(&a.model)?;
    let cfg = SynthConfig::new(a.count, a.seed, a.size, a.size).with_views(a.views).map_err(fail)?;
    let manifest = par::with_jobs(a.jobs, || generate(&model, &cfg, &a.out)).map_err(fail)?;
    info!("wrote {} samples to {}", manifest.samples.len(), a.out.display());
    say!("{} samples ({} redraws) in {}", manifest.samples.len(), manifest.resampled, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn fit_cmd(a: FitArgs) -> CliResult<ExitCode> {
    let model = load(&a.model)?;
    let camera = Camera::load(&a.camera).map_err(fail)?;
    let mask = SilhouetteImage::load_mask(&a.mask).map_err(fail)?;
    let mut cfg = match &a.config {
        Some(path) => FitConfig::load(path).map_err(fail)?,
        None => FitConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.mode = match (a.mode, a.gt.is_some()) {
        (Some(ModeArg::Full), _) => Supervision::Full,
        (Some(ModeArg::Silhouette), _) => Supervision::SilhouetteOnly,
        (None, true) => Supervision::Full,
        (None, false) => Supervision::SilhouetteOnly,
    };
    let gt = match &a.gt {
        Some(path) => {
            let file = GtFile::load(path).map_err(fail)?;
            if file.theta.len() != model.n_pc() {
                return Err(format!(
                    "ground truth `theta` has {} entries but the model has {} pose components",
                    file.theta.len(),
                    model.n_pc()
                ));
            }
            Some(file.ground_truth())
        }
        None => None,
    };
    let id = a
        .mask
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into());
    let result = par::with_jobs(a.jobs, || fit(&model, &camera, &mask, &cfg, gt.as_ref())).map_err(fail)?;
    result.write(&a.out, &model, &id).map_err(fail)?;
    let last = result.loss_trace.last().map(|e| e.loss.total).unwrap_or(f64::NAN);
    say!("{id}: restart {} final loss {last:.6e}", result.best_restart);
    if let Some(m) = &result.metrics {
        say!("{m}");
    }
    Ok(ExitCode::SUCCESS)
}

/// Prediction files in `dir` itself or one level below, sorted by path.
fn find_predictions(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut found = Vec::new();
    let own = dir.join(PredictionFile::FILE_NAME);
    if own.is_file() {
        found.push(own);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| format!("cannot read `pred` {}: {e}", dir.display()))?;
    for entry in entries {
        let path = entry.map_err(fail)?.path().join(PredictionFile::FILE_NAME);
        if path.is_file() {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

fn eval(a: EvalArgs) -> CliResult<ExitCode> {
    let manifest = Manifest::load(&a.gt).map_err(fail)?;
    let by_stem: BTreeMap<String, _> = manifest
        .samples
        .iter()
        .map(|e| (sample_stem(e.id, e.view), e))
        .collect();
    let paths = find_predictions(&a.pred)?;
    if paths.is_empty() {
        return Err(format!("no {} found under {}", PredictionFile::FILE_NAME, a.pred.display()));
    }
    let mut gts = Vec::with_capacity(paths.len());
    let mut preds = Vec::with_capacity(paths.len());
    for path in &paths {
        let pred = PredictionFile::load(path).map_err(fail)?;
        let entry = by_stem
            .get(&pred.id)
            .ok_or_else(|| format!("prediction `id` {} has no sample in {}", pred.id, a.gt.display()))?;
        let (mask_path, _, gt_path) = entry_paths(&a.gt, entry);
        let gt = GtFile::load(gt_path).map_err(fail)?;
        let gt_mask = SilhouetteImage::load_mask(mask_path).map_err(fail)?;
        let hard = path.with_file_name("hard.png");
        let pred_mask = if hard.is_file() {
            Some(SilhouetteImage::load_mask(&hard).map_err(fail)?)
        } else {
            warn!("{} has no hard.png; skipping its IoU", pred.id);
            None
        };
        gts.push(MetricSample {
            id: pred.id.clone(),
            joints: gt.joints,
            vertices: gt.vertices,
            mask: pred_mask.as_ref().map(|_| gt_mask),
        });
        preds.push(MetricSample {
            id: pred.id,
            joints: pred.joints,
            vertices: pred.vertices,
            mask: pred_mask,
        });
    }
    let variant = match a.pa_variant {
        VariantArg::Literal => PaVariant::Literal,
        VariantArg::Proper => PaVariant::Proper,
    };
    let report = evaluate(&gts, &preds, variant).map_err(fail)?;
    let json = report.to_json();
    if let Some(path) = &a.json {
        std::fs::write(path, format!("{json}\n")).map_err(|e| format!("cannot write `json` {}: {e}", path.display()))?;
    }
    say!("{json}");
    say!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn render(a: RenderArgs) -> CliResult<ExitCode> {
    let model = load(&a.model)?;
    let camera = Camera::load(&a.camera).map_err(fail)?;
    let params: HandParams = read_json(&a.params, "params")?;
    params.validate(model.n_pc()).map_err(fail)?;
    let (mesh, _) = pose_mesh(&model, &params).map_err(fail)?;
    let image = if a.soft {
        let side = camera.width.min(camera.height) as f64;
        let sigma = a.sigma.unwrap_or(1e-4 * side * side);
        render_soft(&camera, &mesh.vertices, model.faces(), sigma).map_err(fail)?
    } else {
        render_hard(&camera, &mesh.vertices, model.faces())
    };
    image.save_png(&a.out).map_err(fail)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> CliResult<ExitCode> {
    let model = load(&a.model)?;
    if a.size < 8 {
        return Err("`size` must be at least 8".into());
    }
    let scene = random_scene(&model, a.seed, a.size).map_err(fail)?;
    let mode = match a.mode {
        ModeArg::Full => Supervision::Full,
        ModeArg::Silhouette => Supervision::SilhouetteOnly,
    };
    let target: &Target = &scene.target;
    let gt: &GroundTruth = &scene.gt;
    let objective = Objective::new(&model, &scene.camera, target, Some(gt), mode).map_err(fail)?;
    let report = finite_diff_check(&objective, &scene.params, None, a.h, &[]).map_err(fail)?;
    print_json(&report);
    if report.max_rel_err > GRADCHECK_TOLERANCE {
        eprintln!(
            "gradient check failed: max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e} at h = {:e}",
            report.max_rel_err, a.h
        );
        return Ok(ExitCode::from(EXIT_RUNTIME));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize)]
struct ModelInfo {
    num_vertices: usize,
    num_faces: usize,
    num_skeleton_joints: usize,
    num_joints: usize,
    n_pc: usize,
    n_shape: usize,
    n_params: usize,
    sha256: String,
}

fn model_info(a: ModelArg) -> CliResult<ExitCode> {
    let model = load(&a)?;
    let params = HandParams::zeros(model.n_pc());
    let info = ModelInfo {
        num_vertices: model.template_vertices().len(),
        num_faces: model.faces().len(),
        num_skeleton_joints: NUM_SKELETON_JOINTS,
        num_joints: pose_mesh(&model, &params).map_err(fail)?.1.positions.len(),
        n_pc: model.n_pc(),
        n_shape: params.beta.len(),
        n_params: model.n_params(),
        sha256: model.sha256(),
    };
    print_json(&info);
    Ok(ExitCode::SUCCESS)
}
