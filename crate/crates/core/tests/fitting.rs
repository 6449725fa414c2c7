use silhoufit::alignment::PaVariant;
use silhoufit::camera::Camera;
use silhoufit::diff_engine::Target;
use silhoufit::fitting::{fit, fit_restart, FitConfig, FitResult, PredictionFile};
use silhoufit::hand_model::HandModel;
use silhoufit::image_ops::read_f32_grid;
use silhoufit::losses::{GroundTruth, Supervision};
use silhoufit::metrics::{iou_dice, pa_mpjpe};
use silhoufit::par;
use silhoufit::silhouette::{SilhouetteImage, SilhouetteKind};
use silhoufit::stylized::make_stylized_hand;
use silhoufit::synth::{random_scene, Scene};

const RECOVERY_PRESET: &str = include_str!("../../../configs/recovery.json");

fn small_config() -> FitConfig {
    FitConfig {
        iterations_stage1: 30,
        iterations_stage2: 10,
        learning_rate: 1e-2,
        learning_rate_translation: Some(1e-3),
        restarts: 2,
        seed: 11,
        ..FitConfig::default()
    }
}

fn scene(seed: u64, size: u32) -> (HandModel, Scene) {
    let model = make_stylized_hand(6);
    let scene = random_scene(&model, seed, size).unwrap();
    (model, scene)
}

fn run(model: &HandModel, s: &Scene, cfg: &FitConfig) -> FitResult {
    fit(model, &s.camera, &s.target.mask, cfg, Some(&s.gt)).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn bbox_diagonal_cm(gt: &GroundTruth) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &gt.vertices {
        for c in 0..3 {
            lo[c] = lo[c].min(v[c]);
            hi[c] = hi[c].max(v[c]);
        }
    }
    100.0 * (0..3).map(|c| (hi[c] - lo[c]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn result_invariants_hold() {
    let (model, s) = scene(4, 64);
    let cfg = small_config();
    let r = run(&model, &s, &cfg);
    for ((p, o), v) in r.prelim.vertices.iter().zip(&r.offsets).zip(&r.refined.vertices) {
        for c in 0..3 {
            assert_eq!(p[c] + o[c], v[c]);
        }
    }
    assert_eq!(r.loss_trace.len(), cfg.iterations_stage1 + cfg.iterations_stage2 + 2);
    let objective = cfg.objective(&model, &s.camera, &s.target, Some(&s.gt)).unwrap();
    let recomputed = objective.evaluate(&r.params, Some(&r.offsets)).unwrap().breakdown.total;
    assert!((r.loss_trace.last().unwrap().loss.total - recomputed).abs() <= 1e-9);
    assert_eq!(r.restart_totals.len(), 2);
    let best = r.restart_totals[r.best_restart].unwrap();
    assert!(r.restart_totals.iter().flatten().all(|t| *t >= best));
    let metrics = r.metrics.as_ref().unwrap();
    assert_eq!(metrics.samples.len(), 1);
    assert_eq!(metrics.miou, Some(iou_dice(&r.hard, &s.target.mask).unwrap().0));
}

#[test]
fn fit_is_bit_identical_across_runs_and_thread_counts() {
    let (model, s) = scene(2, 48);
    let cfg = small_config();
    let a = run(&model, &s, &cfg);
    assert_eq!(a, run(&model, &s, &cfg));
    assert_eq!(a, par::with_jobs(1, || run(&model, &s, &cfg)));
}

#[test]
fn restarts_are_isolated() {
    let (model, s) = scene(6, 48);
    let cfg = FitConfig {
        restarts: 3,
        ..small_config()
    };
    let objective = cfg.objective(&model, &s.camera, &s.target, Some(&s.gt)).unwrap();
    let forward: Vec<_> = (0..3).map(|i| fit_restart(&objective, &s.target.mask, &cfg, i).unwrap()).collect();
    let reverse: Vec<_> = (0..3).rev().map(|i| fit_restart(&objective, &s.target.mask, &cfg, i).unwrap()).collect();
    for (f, r) in forward.iter().zip(reverse.iter().rev()) {
        assert_eq!(f, r);
    }
    let full = run(&model, &s, &cfg);
    let totals: Vec<Option<f64>> = forward.iter().map(|r| Some(r.final_loss.total)).collect();
    assert_eq!(full.restart_totals, totals);
    assert_eq!(full.params, forward[full.best_restart].params);
}

#[test]
fn loss_trends_down() {
    let (model, s) = scene(8, 64);
    let cfg = FitConfig {
        iterations_stage1: 100,
        iterations_stage2: 20,
        restarts: 1,
        ..small_config()
    };
    let r = run(&model, &s, &cfg);
    let totals: Vec<f64> = r.loss_trace.iter().map(|e| e.loss.total).collect();
    let k = totals.len() / 10;
    assert!(median(totals[totals.len() - k..].to_vec()) <= median(totals[..k].to_vec()));
}

#[test]
fn stiff_offset_regularizer_gives_constant_field() {
    let (model, s) = scene(3, 48);
    let cfg = FitConfig {
        iterations_stage1: 5,
        iterations_stage2: 200,
        restarts: 1,
        offset_reg: 1e6,
        ..small_config()
    };
    let r = run(&model, &s, &cfg);
    let n = r.offsets.len() as f64;
    for c in 0..3 {
        let mean = r.offsets.iter().map(|o| o[c]).sum::<f64>() / n;
        let var = r.offsets.iter().map(|o| (o[c] - mean).powi(2)).sum::<f64>() / n;
        assert!(var < 1e-8, "axis {c}: {var}");
    }
}

#[test]
fn zero_iterations_reports_metrics_of_the_initial_state() {
    let (model, s) = scene(1, 48);
    let cfg = FitConfig {
        iterations_stage1: 0,
        iterations_stage2: 0,
        ..small_config()
    };
    let r = run(&model, &s, &cfg);
    assert!(r.offsets.iter().all(|o| *o == [0.0; 3]));
    assert_eq!(r.prelim, r.refined);
    let m = r.metrics.unwrap();
    assert!(m.mpjpe_cm > 0.0);
}

#[test]
fn silhouette_only_fit_runs_without_ground_truth() {
    let (model, s) = scene(5, 48);
    let cfg = FitConfig {
        mode: Supervision::SilhouetteOnly,
        ..small_config()
    };
    let r = fit(&model, &s.camera, &s.target.mask, &cfg, None).unwrap();
    assert!(r.metrics.is_none());
    assert!(r.loss_trace.iter().all(|e| e.loss.pose == 0.0 && e.loss.mesh == 0.0));
    assert!(r.loss_trace.last().unwrap().loss.prior > 0.0);
    let full = FitConfig::default();
    assert!(fit(&model, &s.camera, &s.target.mask, &full, None).is_err());
}

#[test]
fn empty_or_mismatched_masks_are_rejected() {
    let model = make_stylized_hand(6);
    let camera = Camera::default_for_size(32, 32);
    let cfg = FitConfig {
        mode: Supervision::SilhouetteOnly,
        ..small_config()
    };
    let empty = SilhouetteImage::zeros(32, 32, SilhouetteKind::Hard);
    assert!(fit(&model, &camera, &empty, &cfg, None).is_err());
    let (_, s) = scene(0, 48);
    assert!(fit(&model, &camera, &s.target.mask, &cfg, None).is_err());
}

#[test]
fn outputs_are_written() {
    let (model, s) = scene(7, 48);
    let r = run(&model, &s, &small_config());
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path(), &model, "sample_00007_v0").unwrap();
    for name in ["params.json", "prelim.obj", "refined.obj", "soft.png", "hard.png", "loss_trace.csv", "metrics.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let (w, h, values) = read_f32_grid(&std::fs::read(dir.path().join("offsets.dfield")).unwrap()).unwrap();
    assert_eq!((w, h), (3, model.template_vertices().len()));
    for (v, o) in values.chunks(3).zip(&r.offsets) {
        for c in 0..3 {
            assert_eq!(v[c], o[c] as f32 as f64);
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("loss_trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), r.loss_trace.len() + 1);
    let pred = PredictionFile::load(dir.path().join(PredictionFile::FILE_NAME)).unwrap();
    assert_eq!(pred.id, "sample_00007_v0");
    assert_eq!(pred.params, r.params);
    assert_eq!(pred.joints, r.refined_joints.positions);
    let hard = SilhouetteImage::load_mask(dir.path().join("hard.png")).unwrap();
    assert_eq!(hard, r.hard);
    let obj = std::fs::read_to_string(dir.path().join("refined.obj")).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), r.refined.vertices.len());
}

#[test]
fn recovery_preset_recovers_synthetic_targets() {
    // Same scenes as the acceptance recovery check, fitted with the tuned
    // preset shipped in configs/ instead of the defaults.
    let cfg = FitConfig::parse(RECOVERY_PRESET, false).unwrap();
    let model = make_stylized_hand(6);
    let mut passed = 0;
    for seed in 0..10 {
        let s = random_scene(&model, 1000 + seed, 128).unwrap();
        let r = run(&model, &s, &cfg);
        let iou = iou_dice(&r.hard, &s.target.mask).unwrap().0;
        let pa = pa_mpjpe(&s.gt.joints, &r.refined_joints.positions, PaVariant::Literal).unwrap();
        if iou >= 0.85 && pa <= 0.05 * bbox_diagonal_cm(&s.gt) {
            passed += 1;
        }
    }
    assert!(passed >= 8, "{passed}/10");
}

#[test]
fn target_from_mask_thresholds_soft_input() {
    let (model, s) = scene(0, 32);
    let soft = silhoufit::render::render_soft(&s.camera, &s.gt.vertices, model.faces(), 0.5).unwrap();
    let t = Target::from_mask(soft).unwrap();
    assert_eq!(t.mask.kind(), SilhouetteKind::Hard);
}
