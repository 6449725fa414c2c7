//! Evaluation metrics: MPJPE / MPVPE (plain and Procrustes-aligned), AUC of
//! the PCK / PCV curves over 0–5 cm, and silhouette IoU / Dice.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::alignment::{procrustes_align, PaVariant};
use crate::error::{Error, Result};
use crate::math::{norm, sub, Vec3};
use crate::par;
use crate::silhouette::SilhouetteImage;

/// Model units are metres; metrics are reported in centimetres.
pub const CM_PER_UNIT: f64 = 100.0;
pub const PCK_POINTS: usize = 100;
pub const PCK_MAX_CM: f64 = 5.0;

/// `t_i = 5·i/99` cm, `i = 0..99`.
pub fn pck_thresholds() -> Vec<f64> {
    (0..PCK_POINTS)
        .map(|i| PCK_MAX_CM * i as f64 / (PCK_POINTS - 1) as f64)
        .collect()
}

/// Per-point Euclidean distances in cm.
pub fn point_errors_cm(gt: &[Vec3], pred: &[Vec3]) -> Result<Vec<f64>> {
    if gt.len() != pred.len() {
        return Err(Error::dim("predicted points", gt.len(), pred.len()));
    }
    Ok(gt.iter().zip(pred).map(|(g, p)| CM_PER_UNIT * norm(sub(*p, *g))).collect())
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Mean joint position error in cm.
pub fn mpjpe(gt: &[Vec3], pred: &[Vec3]) -> Result<f64> {
    Ok(mean(&point_errors_cm(gt, pred)?))
}

/// Mean vertex position error in cm.
pub fn mpvpe(gt: &[Vec3], pred: &[Vec3]) -> Result<f64> {
    mpjpe(gt, pred)
}

/// Per-point errors after aligning `pred` onto `gt`.
pub fn aligned_point_errors_cm(gt: &[Vec3], pred: &[Vec3], variant: PaVariant) -> Result<Vec<f64>> {
    let pa = procrustes_align(gt, pred, variant)?;
    point_errors_cm(gt, &pa.aligned)
}

pub fn pa_mpjpe(gt: &[Vec3], pred: &[Vec3], variant: PaVariant) -> Result<f64> {
    Ok(mean(&aligned_point_errors_cm(gt, pred, variant)?))
}

/// Fraction of errors `≤ t` for each threshold of [`pck_thresholds`].
pub fn pck_curve(errors_cm: &[f64]) -> Result<Vec<f64>> {
    if errors_cm.is_empty() {
        return Err(Error::invariant("pck errors", "empty input"));
    }
    if let Some(e) = errors_cm.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::invariant("pck errors", format!("distances must be ≥ 0, got {e}")));
    }
    let mut sorted = errors_cm.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(pck_thresholds()
        .into_iter()
        .map(|t| sorted.partition_point(|e| *e <= t) as f64 / n)
        .collect())
}

/// Trapezoidal area under a curve sampled on the uniform threshold grid,
/// normalized by the span so a constant-1 curve scores 1.
pub fn auc(curve: &[f64]) -> f64 {
    if curve.len() < 2 {
        return curve.first().copied().unwrap_or(0.0);
    }
    let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    area / (curve.len() - 1) as f64
}

/// Intersection-over-union and Dice of two hard masks (foreground = value
/// ≥ 0.5). Two empty masks agree perfectly: `(1, 1)`.
pub fn iou_dice(a: &SilhouetteImage, b: &SilhouetteImage) -> Result<(f64, f64)> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dim(
            "mask",
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.pixels().iter().zip(b.pixels()) {
        let (x, y) = (*x >= 0.5, *y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    let iou = inter as f64 / union as f64;
    // 2|a∩b| / (|a| + |b|) = 2·IoU / (1 + IoU); the second form keeps the
    // identity exact in floating point.
    Ok((iou, 2.0 * iou / (1.0 + iou)))
}

/// One sample's ground truth or prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSample {
    pub id: String,
    pub joints: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
    pub mask: Option<SilhouetteImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub mpjpe_cm: f64,
    pub mpvpe_cm: f64,
    pub pa_mpjpe_cm: f64,
    pub pa_mpvpe_cm: f64,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
}

/// Aggregate metrics. Position errors and PCK / PCV curves pool every
/// joint (vertex) of every sample; IoU / Dice average over samples that
/// have both masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe_cm: f64,
    pub mpvpe_cm: f64,
    pub pa_mpjpe_cm: f64,
    pub pa_mpvpe_cm: f64,
    pub auc_pck: f64,
    pub auc_pcv: f64,
    pub miou: Option<f64>,
    pub dice: Option<f64>,
    pub pa_variant: PaVariant,
    pub samples: Vec<SampleMetrics>,
}

struct SampleErrors {
    joints: Vec<f64>,
    vertices: Vec<f64>,
    pa_joints: Vec<f64>,
    pa_vertices: Vec<f64>,
    overlap: Option<(f64, f64)>,
}

fn sample_errors(gt: &MetricSample, pred: &MetricSample, variant: PaVariant) -> Result<SampleErrors> {
    let overlap = match (&gt.mask, &pred.mask) {
        (Some(a), Some(b)) => Some(iou_dice(a, b)?),
        _ => None,
    };
    Ok(SampleErrors {
        joints: point_errors_cm(&gt.joints, &pred.joints)?,
        vertices: point_errors_cm(&gt.vertices, &pred.vertices)?,
        pa_joints: aligned_point_errors_cm(&gt.joints, &pred.joints, variant)?,
        pa_vertices: aligned_point_errors_cm(&gt.vertices, &pred.vertices, variant)?,
        overlap,
    })
}

/// Full metric battery over paired samples (matched by position).
pub fn evaluate(gt: &[MetricSample], pred: &[MetricSample], variant: PaVariant) -> Result<MetricReport> {
    if gt.len() != pred.len() {
        return Err(Error::dim("prediction count", gt.len(), pred.len()));
    }
    if gt.is_empty() {
        return Err(Error::invariant("evaluate", "no samples"));
    }
    let per = par::map_range(gt.len(), |i| sample_errors(&gt[i], &pred[i], variant));
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let pool = |f: fn(&SampleErrors) -> &Vec<f64>| -> Vec<f64> { per.iter().flat_map(|s| f(s).iter().copied()).collect() };
    let joints = pool(|s| &s.joints);
    let vertices = pool(|s| &s.vertices);
    let overlaps: Vec<(f64, f64)> = per.iter().filter_map(|s| s.overlap).collect();
    let (miou, dice) = if overlaps.is_empty() {
        (None, None)
    } else {
        let n = overlaps.len() as f64;
        (
            Some(overlaps.iter().map(|o| o.0).sum::<f64>() / n),
            Some(overlaps.iter().map(|o| o.1).sum::<f64>() / n),
        )
    };
    let samples = per
        .iter()
        .zip(gt)
        .map(|(s, g)| SampleMetrics {
            id: g.id.clone(),
            mpjpe_cm: mean(&s.joints),
            mpvpe_cm: mean(&s.vertices),
            pa_mpjpe_cm: mean(&s.pa_joints),
            pa_mpvpe_cm: mean(&s.pa_vertices),
            iou: s.overlap.map(|o| o.0),
            dice: s.overlap.map(|o| o.1),
        })
        .collect();
    Ok(MetricReport {
        mpjpe_cm: mean(&joints),
        mpvpe_cm: mean(&vertices),
        pa_mpjpe_cm: mean(&pool(|s| &s.pa_joints)),
        pa_mpvpe_cm: mean(&pool(|s| &s.pa_vertices)),
        auc_pck: auc(&pck_curve(&joints)?),
        auc_pcv: auc(&pck_curve(&vertices)?),
        miou,
        dice,
        pa_variant: variant,
        samples,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl fmt::Display for MetricReport {
    /// Aligned plain-text table: one header row and one row of values.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = [
            ("MPJPE", cell(Some(self.mpjpe_cm))),
            ("MPVPE", cell(Some(self.mpvpe_cm))),
            ("PA-MPJPE", cell(Some(self.pa_mpjpe_cm))),
            ("PA-MPVPE", cell(Some(self.pa_mpvpe_cm))),
            ("AUC-J", cell(Some(self.auc_pck))),
            ("AUC-V", cell(Some(self.auc_pcv))),
            ("mIoU", cell(self.miou)),
            ("Dice", cell(self.dice)),
        ];
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let header: Vec<String> = cols.iter().zip(&widths).map(|((h, _), w)| format!("{h:>w$}")).collect();
        let values: Vec<String> = cols.iter().zip(&widths).map(|((_, v), w)| format!("{v:>w$}")).collect();
        writeln!(f, "{}", header.join("  "))?;
        writeln!(f, "{}", values.join("  "))?;
        write!(f, "(positions in cm over {} samples, PA variant {:?})", self.samples.len(), self.pa_variant)
    }
}
