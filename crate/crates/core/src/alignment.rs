//! Orthogonal Procrustes alignment of a predicted point set onto a
//! reference, with its exact adjoint.
//!
//! Both sets are centered and scaled to unit Frobenius norm; with
//! `A = Jnᵀ Pn = U Σ Vᵀ` the alignment uses `Q = U D Vᵀ`, `s = tr(Σ D)` and
//! returns `Pn Qᵀ s ‖J‖ + mean(J)`. [`PaVariant::Literal`] takes `D = I`
//! (so `Q` may be a reflection); [`PaVariant::Proper`] flips the smallest
//! singular direction when needed so that `det Q = +1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

/// Singular value gaps below this make `Q` non-differentiable; the adjoint
/// then treats `Q` as a constant.
pub const SVD_GAP_TOLERANCE: f64 = 1e-6;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaVariant {
    /// `Q = U Vᵀ`, reflections allowed.
    #[default]
    Literal,
    /// `det Q = +1`.
    Proper,
}

/// Singular value decomposition `A = U diag(sigma) Vᵀ` with
/// `sigma` sorted in decreasing order and `U`, `V` orthogonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

fn col(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

fn set_col(m: &mut Mat3, j: usize, c: Vec3) {
    for i in 0..3 {
        m[i][j] = c[i];
    }
}

/// One-sided Jacobi SVD of a 3×3 matrix.
pub fn svd3(a: &Mat3) -> Svd3 {
    let mut b = *a;
    let mut v = math::IDENTITY;
    for _sweep in 0..64 {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let bp = col(&b, p);
            let bq = col(&b, q);
            let alpha = math::dot(bp, bp);
            let beta = math::dot(bq, bq);
            let gamma = math::dot(bp, bq);
            if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut b, &mut v] {
                let mp = col(m, p);
                let mq = col(m, q);
                set_col(m, p, math::sub(math::scale(mp, c), math::scale(mq, s)));
                set_col(m, q, math::add(math::scale(mp, s), math::scale(mq, c)));
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order = [0usize, 1, 2];
    let norms = [0, 1, 2].map(|j| math::norm(col(&b, j)));
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    let mut sigma = [0.0; 3];
    for (k, &j) in order.iter().enumerate() {
        sigma[k] = norms[j];
        set_col(&mut vs, k, col(&v, j));
    }
    // Left singular vectors; complete the basis where sigma vanishes.
    let tiny = 1e-14 * sigma[0].max(f64::MIN_POSITIVE);
    let mut basis: Vec<Vec3> = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if sigma[k] > tiny {
            basis.push(math::scale(col(&b, j), 1.0 / sigma[k]));
        }
    }
    let rank = basis.len();
    for e in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
        if basis.len() == 3 {
            break;
        }
        let mut w = e;
        for q in &basis {
            w = math::sub(w, math::scale(*q, math::dot(w, *q)));
        }
        let n = math::norm(w);
        if n > 1e-6 {
            basis.push(math::scale(w, 1.0 / n));
        }
    }
    for (k, c) in basis.iter().enumerate() {
        set_col(&mut u, k, *c);
    }
    if rank < 3 {
        for s in sigma.iter_mut().skip(rank) {
            *s = 0.0;
        }
    }
    Svd3 { u, sigma, v: vs }
}

/// Alignment result plus the intermediates its adjoint needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesResult {
    /// Predicted points mapped into the reference frame.
    pub aligned: Vec<Vec3>,
    /// Orthogonal `Q`.
    pub rotation: Mat3,
    /// `s = tr(Σ D)`, in normalized units.
    pub scale: f64,
    /// Frobenius norm of the centered reference.
    pub ref_norm: f64,
    pub ref_mean: Vec3,
    pred_norm: f64,
    ref_normalized: Vec<Vec3>,
    pred_normalized: Vec<Vec3>,
    svd: Svd3,
    signs: Vec3,
}

fn center(points: &[Vec3]) -> (Vec3, Vec<Vec3>, f64) {
    let k = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        mean = math::add(mean, *p);
    }
    mean = math::scale(mean, 1.0 / k);
    let centered: Vec<Vec3> = points.iter().map(|p| math::sub(*p, mean)).collect();
    let norm = centered.iter().map(|p| math::dot(*p, *p)).sum::<f64>().sqrt();
    (mean, centered, norm)
}

/// Aligns `predicted` onto `reference` by centering, Frobenius
/// normalization and orthogonal Procrustes.
pub fn procrustes_align(reference: &[Vec3], predicted: &[Vec3], variant: PaVariant) -> Result<ProcrustesResult> {
    if reference.len() != predicted.len() {
        return Err(Error::dim("procrustes predicted", reference.len(), predicted.len()));
    }
    if reference.len() < 3 {
        return Err(Error::invariant("procrustes", "needs at least 3 points"));
    }
    if reference.iter().chain(predicted).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: "procrustes input".into(),
        });
    }
    let (ref_mean, rc, ref_norm) = center(reference);
    let (_, pc, pred_norm) = center(predicted);
    if pred_norm < DEGENERATE_NORM {
        return Err(Error::Degenerate("predicted points collapse to a single point".into()));
    }
    if ref_norm < DEGENERATE_NORM {
        return Err(Error::Degenerate("reference points collapse to a single point".into()));
    }
    let jn: Vec<Vec3> = rc.iter().map(|p| math::scale(*p, 1.0 / ref_norm)).collect();
    let pn: Vec<Vec3> = pc.iter().map(|p| math::scale(*p, 1.0 / pred_norm)).collect();
    let mut a = [[0.0; 3]; 3];
    for (j, p) in jn.iter().zip(&pn) {
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += j[r] * p[c];
            }
        }
    }
    let svd = svd3(&a);
    let mut signs = [1.0; 3];
    if variant == PaVariant::Proper && math::det(&svd.u) * math::det(&svd.v) < 0.0 {
        signs[2] = -1.0;
    }
    let ud = [0, 1, 2].map(|r| [0, 1, 2].map(|c| svd.u[r][c] * signs[c]));
    let q = math::mat_mul(&ud, &math::transpose(&svd.v));
    let scale: f64 = (0..3).map(|i| signs[i] * svd.sigma[i]).sum();
    let aligned = pn
        .iter()
        .map(|p| {
            // p Qᵀ as a row vector equals Q p.
            math::add(math::scale(math::mat_vec(&q, *p), scale * ref_norm), ref_mean)
        })
        .collect();
    Ok(ProcrustesResult {
        aligned,
        rotation: q,
        scale,
        ref_norm,
        ref_mean,
        pred_norm,
        ref_normalized: jn,
        pred_normalized: pn,
        svd,
        signs,
    })
}

impl ProcrustesResult {
    /// Pulls `dL/d aligned` back to `dL/d predicted`.
    pub fn backward(&self, grad_aligned: &[Vec3]) -> Vec<Vec3> {
        let k = self.pred_normalized.len();
        assert_eq!(grad_aligned.len(), k, "gradient length must match the point count");
        let q = &self.rotation;
        let s = self.scale;
        let g: Vec<Vec3> = grad_aligned.iter().map(|v| math::scale(*v, self.ref_norm)).collect();
        let pn = &self.pred_normalized;

        // aligned' = s Pn Qᵀ
        let mut g_pn: Vec<Vec3> = g.iter().map(|gk| math::scale(math::mat_vec(&math::transpose(q), *gk), s)).collect();
        let mut g_q = [[0.0; 3]; 3];
        let mut g_s = 0.0;
        for (gk, pk) in g.iter().zip(pn) {
            let qp = math::mat_vec(q, *pk);
            g_s += math::dot(*gk, qp);
            for r in 0..3 {
                for c in 0..3 {
                    g_q[r][c] += s * gk[r] * pk[c];
                }
            }
        }

        // Through the SVD: dL/dA' in the singular frame.
        let Svd3 { u, sigma, v } = &self.svd;
        let d = self.signs;
        let h = math::mat_mul(&math::mat_mul(&math::transpose(u), &g_q), v);
        let mut g_a_prime = [[0.0; 3]; 3];
        let mut q_differentiable = true;
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let gap = if d[i] == d[j] {
                    sigma[i] + sigma[j]
                } else {
                    (sigma[i] - sigma[j]).abs()
                };
                if gap < SVD_GAP_TOLERANCE {
                    q_differentiable = false;
                }
            }
        }
        if !q_differentiable {
            log::debug!("procrustes: singular values {sigma:?} too close; treating Q as constant");
        }
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    g_a_prime[i][i] = g_s * d[i];
                } else if q_differentiable {
                    g_a_prime[i][j] = if d[i] == d[j] {
                        d[i] * (h[i][j] - h[j][i]) / (sigma[i] + sigma[j])
                    } else {
                        (h[i][j] * (d[j] * sigma[j] - d[i] * sigma[i]) + h[j][i] * (d[j] * sigma[i] - d[i] * sigma[j]))
                            / (sigma[j] * sigma[j] - sigma[i] * sigma[i])
                    };
                }
            }
        }
        let g_a = math::mat_mul(&math::mat_mul(u, &g_a_prime), &math::transpose(v));
        // A = Jnᵀ Pn
        for (gp, jk) in g_pn.iter_mut().zip(&self.ref_normalized) {
            for c in 0..3 {
                for r in 0..3 {
                    gp[c] += jk[r] * g_a[r][c];
                }
            }
        }

        // Pn = Pc / ‖Pc‖, Pc = P - mean(P).
        let inner: f64 = g_pn.iter().zip(pn).map(|(a, b)| math::dot(*a, *b)).sum();
        let g_pc: Vec<Vec3> = g_pn
            .iter()
            .zip(pn)
            .map(|(gk, pk)| math::scale(math::sub(*gk, math::scale(*pk, inner)), 1.0 / self.pred_norm))
            .collect();
        let mut mean = [0.0; 3];
        for gk in &g_pc {
            mean = math::add(mean, *gk);
        }
        mean = math::scale(mean, 1.0 / k as f64);
        g_pc.iter().map(|gk| math::sub(*gk, mean)).collect()
    }
}
