//! Acceptance checks. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use silhoufit::alignment::PaVariant;
use silhoufit::diff_engine::{finite_diff_check, Objective};
use silhoufit::fitting::{fit, FitConfig};
use silhoufit::hand_model::{pose_mesh, rodrigues, HandModel, HandParams};
use silhoufit::image_ops::{
    contour_of_binary, distance_field_of_mask, distance_transform, soft_binarize, soft_binarize_value, soft_contour,
};
use silhoufit::losses::{aligned_mesh_loss, aligned_pose_loss, contour_loss, GroundTruth, Supervision};
use silhoufit::math::{add, dot, mat_vec, norm, scale, sub, Mat3, Vec3};
use silhoufit::metrics::{evaluate, iou_dice, mpjpe, pa_mpjpe, MetricSample};
use silhoufit::par;
use silhoufit::render::render_hard;
use silhoufit::silhouette::SilhouetteImage;
use silhoufit::stylized::make_stylized_hand;
use silhoufit::synth::{entry_paths, generate, random_scene, GtFile, Manifest, SynthConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn model() -> HandModel {
    make_stylized_hand(6)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    rodrigues(scale(axis, angle / norm(axis).max(1e-9)))
}

fn random_params(rng: &mut ChaCha8Rng, n_pc: usize) -> HandParams {
    HandParams {
        theta: (0..n_pc).map(|_| rng.random_range(-1.0..1.0)).collect(),
        beta: (0..10).map(|_| rng.random_range(-1.0..1.0)).collect(),
        rotation: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
        translation: [0.0, 0.0, 0.5],
    }
}

fn similarity(points: &[Vec3], r: &Mat3, s: f64, t: Vec3) -> Vec<Vec3> {
    points.iter().map(|p| add(scale(mat_vec(r, *p), s), t)).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let model = model();
    let mut worst: Vec<String> = Vec::new();
    let mut max_err: f64 = 0.0;
    for seed in 0..10 {
        let scene = random_scene(&model, seed, 64).map_err(|e| e.to_string())?;
        let obj = Objective::new(&model, &scene.camera, &scene.target, Some(&scene.gt), Supervision::Full)
            .map_err(|e| e.to_string())?;
        let report = finite_diff_check(&obj, &scene.params, None, 1e-5, &[]).map_err(|e| e.to_string())?;
        max_err = max_err.max(report.max_rel_err);
        worst.push(format!("{:.2e}", report.max_rel_err));
    }
    let elapsed = start.elapsed();
    check(
        max_err < 1e-2 && elapsed < Duration::from_secs(120),
        format!("max rel err {max_err:.3e} (per scene [{}]), {}", worst.join(", "), secs(elapsed)),
    )
}

fn brute_force_field(contour: &[(usize, usize)], w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let best = contour
                .iter()
                .map(|&(cx, cy)| ((cx as f64 - x as f64).powi(2) + (cy as f64 - y as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            out.push(best);
        }
    }
    out
}

fn distance_transform_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut masks = 0;
    let mut mismatches = 0;
    while masks < 50 {
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let density = rng.random_range(0.05..0.9);
        let bits: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
        let mask = SilhouetteImage::from_bools(w, h, &bits).map_err(|e| e.to_string())?;
        let contour = contour_of_binary(&mask);
        if contour.is_empty() {
            continue;
        }
        masks += 1;
        let df = distance_transform(&contour, w, h).map_err(|e| e.to_string())?;
        if df.values() != brute_force_field(&contour, w, h).as_slice() {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches}/50 masks differ from brute force"))
}

fn procrustes_suite() -> Outcome {
    let model = model();
    let mut rng = ChaCha8Rng::seed_from_u64(93);
    let mut worst_loss: f64 = 0.0;
    for trial in 0..100 {
        let (mesh, joints) = pose_mesh(&model, &random_params(&mut rng, 6)).map_err(|e| e.to_string())?;
        let r = random_rotation(&mut rng);
        let s = if trial % 2 == 0 { 1.0 } else { rng.random_range(0.2..5.0) };
        let t = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let pj = similarity(&joints.positions, &r, s, t);
        let pv = similarity(&mesh.vertices, &r, s, t);
        for variant in [PaVariant::Literal, PaVariant::Proper] {
            let lj = aligned_pose_loss(&joints.positions, &pj, &pj, variant).map_err(|e| e.to_string())?;
            let lv = aligned_mesh_loss(&mesh.vertices, &pv, &pv, variant).map_err(|e| e.to_string())?;
            worst_loss = worst_loss.max(lj).max(lv);
        }
    }

    // Sampling oracle: in normalized coordinates the best residual for a
    // fixed orthogonal Q is sqrt(1 - c²) with c = max(<Jn, Q Pn>, 0).
    let centered = |p: &[Vec3]| -> (Vec<Vec3>, f64) {
        let n = p.len() as f64;
        let mean = p.iter().fold([0.0; 3], |a, b| add(a, *b));
        let mean = scale(mean, 1.0 / n);
        let c: Vec<Vec3> = p.iter().map(|x| sub(*x, mean)).collect();
        let f = c.iter().map(|x| dot(*x, *x)).sum::<f64>().sqrt();
        (c, f)
    };
    let mut worst_gain = f64::NEG_INFINITY;
    for _ in 0..20 {
        let j: Vec<Vec3> = (0..21).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let p: Vec<Vec3> = (0..21).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let (jc, jn) = centered(&j);
        let (pc, pn) = centered(&p);
        for variant in [PaVariant::Literal, PaVariant::Proper] {
            let aligned = silhoufit::alignment::procrustes_align(&j, &p, variant).map_err(|e| e.to_string())?;
            let computed = aligned
                .aligned
                .iter()
                .zip(&j)
                .map(|(a, b)| dot(sub(*a, *b), sub(*a, *b)))
                .sum::<f64>()
                .sqrt()
                / jn;
            let mut sampled = f64::INFINITY;
            for _ in 0..5_000 {
                let q = random_rotation(&mut rng);
                let c = jc.iter().zip(&pc).map(|(a, b)| dot(*a, mat_vec(&q, *b))).sum::<f64>() / (jn * pn);
                sampled = sampled.min((1.0 - c.max(0.0).powi(2)).max(0.0).sqrt());
            }
            worst_gain = worst_gain.max(computed - sampled);
        }
    }
    check(
        worst_loss < 1e-9 && worst_gain <= 1e-3,
        format!("max aligned loss {worst_loss:.2e}; best sampled rotation beats alignment by {worst_gain:.2e}"),
    )
}

fn square(size: usize, x0: usize, y0: usize, side: usize) -> SilhouetteImage {
    let bits: Vec<bool> = (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            x >= x0 && x < x0 + side && y >= y0 && y < y0 + side
        })
        .collect();
    SilhouetteImage::from_bools(size, size, &bits).expect("valid square")
}

fn contour_suite() -> Outcome {
    let b = soft_binarize_value(0.6);
    let value_ok = (b - 0.9999546).abs() <= 1e-7;

    let mut stray = 0;
    for (x0, y0, side) in [(4, 4, 8), (0, 0, 10), (10, 3, 5), (2, 9, 12), (7, 7, 1), (1, 1, 22)] {
        let m = square(24, x0, y0, side);
        let c = soft_contour(&soft_binarize(&m));
        for y in 0..24isize {
            for x in 0..24isize {
                // Chebyshev distance > 1 from every pixel of the other class.
                let here = m.get(x as usize, y as usize);
                let near_boundary = (-2..=2).any(|dy: isize| {
                    (-2..=2).any(|dx: isize| {
                        let (xx, yy) = (x + dx, y + dy);
                        let v = if xx < 0 || yy < 0 || xx >= 24 || yy >= 24 { 0.0 } else { m.get(xx as usize, yy as usize) };
                        v != here
                    })
                });
                if !near_boundary && c.get(x as usize, y as usize) != 0.0 {
                    stray += 1;
                }
            }
        }
    }

    let target = square(40, 12, 12, 12);
    let df = distance_field_of_mask(&target).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    for shift in 0..=8 {
        losses.push(contour_loss(&square(40, 12 + shift, 12, 12), &df, 0).map_err(|e| e.to_string())?);
    }
    let monotone = losses.windows(2).all(|w| w[0] <= w[1]) && losses[8] > losses[0];
    check(
        value_ok && stray == 0 && monotone,
        format!(
            "soft_binarize(0.6) = {b:.9}; {stray} responses beyond 1 px; shift sweep {}",
            losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn metric_suite() -> Outcome {
    let model = model();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let camera = silhoufit::camera::Camera::default_for_size(64, 64);
    let mut gts = Vec::new();
    for i in 0..5 {
        let (mesh, joints) = pose_mesh(&model, &random_params(&mut rng, 6)).map_err(|e| e.to_string())?;
        gts.push(MetricSample {
            id: format!("s{i}"),
            mask: Some(render_hard(&camera, &mesh.vertices, model.faces())),
            joints: joints.positions,
            vertices: mesh.vertices,
        });
    }
    let perfect = evaluate(&gts, &gts, PaVariant::Literal).map_err(|e| e.to_string())?;
    let perfect_ok = perfect.mpjpe_cm == 0.0
        && perfect.mpvpe_cm == 0.0
        && perfect.auc_pck == 1.0
        && perfect.miou == Some(1.0)
        && perfect.dice == Some(1.0);

    let mut worst_pa: f64 = 0.0;
    let mut min_mpjpe = f64::INFINITY;
    for g in &gts {
        let moved = similarity(&g.joints, &random_rotation(&mut rng), 1.0, [0.05, -0.02, 0.1]);
        min_mpjpe = min_mpjpe.min(mpjpe(&g.joints, &moved).map_err(|e| e.to_string())?);
        for variant in [PaVariant::Literal, PaVariant::Proper] {
            worst_pa = worst_pa.max(pa_mpjpe(&g.joints, &moved, variant).map_err(|e| e.to_string())?);
        }
    }

    let mut identity_ok = true;
    for i in 0..50 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let a: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.5)).collect();
        let b: Vec<bool> = (0..w * h).map(|_| rng.random_bool(if i % 5 == 0 { 0.0 } else { 0.5 })).collect();
        let (iou, dice) = iou_dice(
            &SilhouetteImage::from_bools(w, h, &a).map_err(|e| e.to_string())?,
            &SilhouetteImage::from_bools(w, h, &b).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        identity_ok &= dice == 2.0 * iou / (1.0 + iou);
    }
    check(
        perfect_ok && worst_pa < 1e-6 && min_mpjpe > 0.0 && identity_ok,
        format!(
            "perfect: MPJPE {} AUC {} mIoU {:?} Dice {:?}; rigid: PA-MPJPE {worst_pa:.2e} cm, MPJPE ≥ {min_mpjpe:.3} cm; Dice identity {}",
            perfect.mpjpe_cm,
            perfect.auc_pck,
            perfect.miou,
            perfect.dice,
            if identity_ok { "exact" } else { "violated" }
        ),
    )
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
    100.0 * norm(sub(hi, lo))
}

fn recovery_suite() -> Outcome {
    let model = model();
    let cfg = FitConfig::default();
    let start = Instant::now();
    let mut passed = 0;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let scene = random_scene(&model, 1000 + seed, 128).map_err(|e| e.to_string())?;
        let r = par::with_jobs(1, || fit(&model, &scene.camera, &scene.target.mask, &cfg, Some(&scene.gt)))
            .map_err(|e| e.to_string())?;
        let iou = iou_dice(&r.hard, &scene.target.mask).map_err(|e| e.to_string())?.0;
        let pa = pa_mpjpe(&scene.gt.joints, &r.refined_joints.positions, cfg.pa_variant).map_err(|e| e.to_string())?;
        let limit = 0.05 * bbox_diagonal_cm(&scene.gt);
        if iou >= 0.85 && pa <= limit {
            passed += 1;
        }
        rows.push(format!("IoU {iou:.2}/PA {pa:.2}≤{limit:.2}"));
    }
    let elapsed = start.elapsed();
    check(
        passed >= 8 && elapsed < Duration::from_secs(600),
        format!("{passed}/10 recovered, {} [{}]", secs(elapsed), rows.join("; ")),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("readable")
        .map(|e| {
            let p = e.expect("entry").path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).expect("file"))
        })
        .collect();
    files.sort();
    files
}

fn determinism_suite() -> Outcome {
    let model = model();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SynthConfig::new(3, 21, 64, 64).with_views(2).map_err(|e| e.to_string())?;
    let dirs = ["a", "b", "c"].map(|d| tmp.path().join(d));
    par::with_jobs(1, || generate(&model, &cfg, &dirs[0])).map_err(|e| e.to_string())?;
    par::with_jobs(1, || generate(&model, &cfg, &dirs[1])).map_err(|e| e.to_string())?;
    par::with_jobs(3, || generate(&model, &cfg, &dirs[2])).map_err(|e| e.to_string())?;
    let synth_ok = snapshot(&dirs[0]) == snapshot(&dirs[1]) && snapshot(&dirs[0]) == snapshot(&dirs[2]);

    let manifest = Manifest::load(&dirs[0]).map_err(|e| e.to_string())?;
    let (mask_path, _, gt_path) = entry_paths(&dirs[0], &manifest.samples[0]);
    let mask = SilhouetteImage::load_mask(mask_path).map_err(|e| e.to_string())?;
    let gt = GtFile::load(gt_path).map_err(|e| e.to_string())?.ground_truth();
    let fit_cfg = FitConfig {
        iterations_stage1: 100,
        iterations_stage2: 50,
        ..FitConfig::default()
    };
    let mut fits = Vec::new();
    for (i, jobs) in [1, 1, 3].into_iter().enumerate() {
        let out = tmp.path().join(format!("fit{i}"));
        let r = par::with_jobs(jobs, || fit(&model, &manifest.camera, &mask, &fit_cfg, Some(&gt))).map_err(|e| e.to_string())?;
        r.write(&out, &model, "sample_00000_v0").map_err(|e| e.to_string())?;
        fits.push(snapshot(&out));
    }
    let fit_ok = fits[0] == fits[1] && fits[0] == fits[2];
    check(
        synth_ok && fit_ok,
        format!(
            "synth re-runs {} ({} files); fit re-runs {} ({} files)",
            if synth_ok { "identical" } else { "differ" },
            snapshot(&dirs[0]).len(),
            if fit_ok { "identical" } else { "differ" },
            fits[0].len()
        ),
    )
}

fn round_trip_suite() -> Outcome {
    let model = model();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SynthConfig::new(20, 5, 128, 128).with_views(5).map_err(|e| e.to_string())?;
    let manifest = generate(&model, &cfg, tmp.path()).map_err(|e| e.to_string())?;
    manifest.verify(tmp.path()).map_err(|e| e.to_string())?;
    let mut mismatches = 0;
    for entry in &manifest.samples {
        let (mask_path, _, gt_path) = entry_paths(tmp.path(), entry);
        let gt = GtFile::load(gt_path).map_err(|e| e.to_string())?;
        let (mesh, _) = pose_mesh(&model, &gt.params()).map_err(|e| e.to_string())?;
        let rendered = render_hard(&manifest.camera, &mesh.vertices, model.faces());
        let stored = std::fs::read(&mask_path).map_err(|e| e.to_string())?;
        if rendered.to_png_bytes() != stored {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches}/{} samples differ from their re-render", manifest.samples.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("distance transform", distance_transform_suite),
        ("procrustes suite", procrustes_suite),
        ("contour-loss formula checks", contour_suite),
        ("metric identities", metric_suite),
        ("synthetic recovery (defaults)", recovery_suite),
        ("determinism", determinism_suite),
        ("round-trip", round_trip_suite),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
