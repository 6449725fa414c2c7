//! Silhouette rasterization.
//!
//! The soft rasterizer aggregates per-face probabilities
//! `D_f(p) = logistic(s * d^2 / sigma)`, where `d` is the distance from the
//! pixel center to the nearest projected edge of face `f` and `s` is `+1`
//! inside and `-1` outside, into `coverage = 1 - prod_f (1 - D_f)`.
//! The product is kept in log space (`-sum softplus(z_f)`), which keeps the
//! per-face adjoint `d coverage / d z_f = prod * logistic(z_f)` exact even
//! when interior pixels saturate.
//!
//! Outside a face, influence is cut off at `truncation * sqrt(sigma)`
//! pixels. To keep the image continuous in the vertex positions, outside
//! contributions carry a linear taper `c * z / T^2` with
//! `c = softplus(-T^2)`, which is exactly zero on the edge and exactly
//! cancels the softplus at the cutoff. It shifts outside log-coverage by at
//! most `c` (about 1.2e-4 for `T = 3`).
//!
//! There is no depth test: silhouettes are unions over faces.

use crate::camera::Camera;
use crate::error::Result;
use crate::math::{logistic, Vec3};
use crate::par;
use crate::silhouette::{SilhouetteImage, SilhouetteKind};

/// Faces with any vertex at or below this depth are skipped.
const NEAR_PLANE: f64 = 1e-6;
/// Projected triangles with smaller doubled area (px^2) are skipped.
const DEGENERATE_AREA: f64 = 1e-12;

/// Soft rasterizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftRasterSettings {
    /// Sharpness in pixels^2.
    pub sigma: f64,
    /// Outside influence radius as a multiple of `sqrt(sigma)`.
    pub truncation: f64,
}

impl SoftRasterSettings {
    /// `sigma = 1e-4 * min(width, height)^2`, truncation `3 sqrt(sigma)`.
    pub fn for_camera(camera: &Camera) -> Self {
        let m = camera.width.min(camera.height) as f64;
        Self {
            sigma: 1e-4 * m * m,
            truncation: 3.0,
        }
    }

    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            truncation: 3.0,
        }
    }

    fn radius(&self) -> f64 {
        self.truncation * self.sigma.sqrt()
    }

    /// Slope of the outside taper in logit units.
    fn taper_slope(&self) -> f64 {
        let t2 = self.truncation * self.truncation;
        softplus(-t2) / t2
    }
}

#[derive(Debug, Clone)]
struct ProjectedFace {
    vertices: [usize; 3],
    p: [[f64; 2]; 3],
    /// Inclusive pixel ranges.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Result of a soft forward pass, retained for the backward pass.
#[derive(Debug, Clone)]
pub struct SoftRender {
    pub image: SilhouetteImage,
    /// Per pixel `sum_f softplus(z_f)`, i.e. `-log(1 - coverage)`.
    log_background: Vec<f64>,
    faces: Vec<ProjectedFace>,
    settings: SoftRasterSettings,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Nearest point on the segment `a..b` to `p`: `(d^2, t, p - q)`.
#[inline]
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64, [f64; 2]) {
    let e = sub2(b, a);
    let ap = sub2(p, a);
    let len2 = e[0] * e[0] + e[1] * e[1];
    let t = if len2 > 0.0 {
        ((ap[0] * e[0] + ap[1] * e[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let r = [ap[0] - t * e[0], ap[1] - t * e[1]];
    (r[0] * r[0] + r[1] * r[1], t, r)
}

/// Signed, scaled squared distance `z` for pixel center `p`, plus the data
/// needed for its derivative. `None` outside the truncation radius.
#[inline]
fn face_logit(p: [f64; 2], tri: &[[f64; 2]; 3], inv_sigma: f64, r2: f64) -> Option<(f64, usize, f64, [f64; 2], f64)> {
    let area = cross2(sub2(tri[1], tri[0]), sub2(tri[2], tri[0]));
    let mut best = (f64::INFINITY, 0usize, 0.0, [0.0; 2]);
    let mut inside = true;
    for e in 0..3 {
        let a = tri[e];
        let b = tri[(e + 1) % 3];
        if cross2(sub2(b, a), sub2(p, a)) * area < 0.0 {
            inside = false;
        }
        let (d2, t, r) = segment_distance(p, a, b);
        if d2 < best.0 {
            best = (d2, e, t, r);
        }
    }
    if !inside && best.0 > r2 {
        return None;
    }
    let sign = if inside { 1.0 } else { -1.0 };
    Some((sign * best.0 * inv_sigma, best.1, best.2, best.3, sign))
}

fn project_faces(camera: &Camera, vertices: &[Vec3], faces: &[[u32; 3]], margin: f64) -> Vec<ProjectedFace> {
    let w = camera.width as f64;
    let h = camera.height as f64;
    faces
        .iter()
        .filter_map(|f| {
            let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
            if idx.iter().any(|&i| !(vertices[i][2] > NEAR_PLANE)) {
                return None;
            }
            let p = idx.map(|i| camera.project_unchecked(vertices[i]));
            let area = cross2(sub2(p[1], p[0]), sub2(p[2], p[0]));
            if !(area.abs() > DEGENERATE_AREA) {
                return None;
            }
            let minx = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min) - margin;
            let maxx = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max) + margin;
            let miny = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min) - margin;
            let maxy = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max) + margin;
            // Pixel centers at +0.5.
            let x0 = (minx - 0.5).ceil().max(0.0);
            let x1 = (maxx - 0.5).floor().min(w - 1.0);
            let y0 = (miny - 0.5).ceil().max(0.0);
            let y1 = (maxy - 0.5).floor().min(h - 1.0);
            if x0 > x1 || y0 > y1 {
                return None;
            }
            Some(ProjectedFace {
                vertices: idx,
                p,
                x0: x0 as usize,
                x1: x1 as usize,
                y0: y0 as usize,
                y1: y1 as usize,
            })
        })
        .collect()
}

fn faces_by_row(faces: &[ProjectedFace], height: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); height];
    for (i, f) in faces.iter().enumerate() {
        for row in &mut rows[f.y0..=f.y1] {
            row.push(i);
        }
    }
    rows
}

/// Soft forward pass keeping what the backward pass needs.
pub fn render_soft_with_cache(
    camera: &Camera,
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    settings: SoftRasterSettings,
) -> SoftRender {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let r = settings.radius();
    let projected = project_faces(camera, vertices, faces, r);
    let rows = faces_by_row(&projected, h);
    let inv_sigma = 1.0 / settings.sigma;
    let r2 = r * r;
    let taper = settings.taper_slope();
    let mut log_background = vec![0.0; w * h];
    par::for_each_row(&mut log_background, w, |y, row| {
        let py = y as f64 + 0.5;
        for &fi in &rows[y] {
            let f = &projected[fi];
            for (x, acc) in row.iter_mut().enumerate().take(f.x1 + 1).skip(f.x0) {
                if let Some((z, ..)) = face_logit([x as f64 + 0.5, py], &f.p, inv_sigma, r2) {
                    *acc += softplus(z) + taper * z.min(0.0);
                }
            }
        }
    });
    let coverage = log_background.iter().map(|s| -(-s).exp_m1()).collect();
    SoftRender {
        image: SilhouetteImage::from_raw(w, h, coverage, SilhouetteKind::Soft),
        log_background,
        faces: projected,
        settings,
    }
}

/// Differentiable soft silhouette of a mesh.
pub fn render_soft(camera: &Camera, vertices: &[Vec3], faces: &[[u32; 3]], sigma: f64) -> Result<SilhouetteImage> {
    if !(sigma > 0.0) {
        return Err(crate::Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok(render_soft_with_cache(camera, vertices, faces, SoftRasterSettings::with_sigma(sigma)).image)
}

impl SoftRender {
    /// Gradient of `sum_p grad_image[p] * coverage[p]` with respect to the
    /// camera-space vertex positions.
    pub fn backward(&self, camera: &Camera, vertices: &[Vec3], grad_image: &[f64]) -> Vec<Vec3> {
        let w = self.image.width();
        let inv_sigma = 1.0 / self.settings.sigma;
        let r = self.settings.radius();
        let r2 = r * r;
        let taper = self.settings.taper_slope();
        // d coverage / d z_f = exp(-S) * logistic(z_f)
        let pixel_scale: Vec<f64> = grad_image
            .iter()
            .zip(&self.log_background)
            .map(|(g, s)| if *g == 0.0 { 0.0 } else { g * (-s).exp() })
            .collect();
        let per_face: Vec<[[f64; 2]; 3]> = par::map_range(self.faces.len(), |fi| {
            let f = &self.faces[fi];
            let mut g = [[0.0; 2]; 3];
            for y in f.y0..=f.y1 {
                let py = y as f64 + 0.5;
                for x in f.x0..=f.x1 {
                    let k = pixel_scale[y * w + x];
                    if k == 0.0 {
                        continue;
                    }
                    let Some((z, e, t, rvec, sign)) = face_logit([x as f64 + 0.5, py], &f.p, inv_sigma, r2) else {
                        continue;
                    };
                    let dz = logistic(z) + if z < 0.0 { taper } else { 0.0 };
                    let gz = k * dz * sign * inv_sigma;
                    // d(d^2)/da = -2 r (1 - t), d(d^2)/db = -2 r t
                    let a = e;
                    let b = (e + 1) % 3;
                    for c in 0..2 {
                        g[a][c] -= 2.0 * gz * rvec[c] * (1.0 - t);
                        g[b][c] -= 2.0 * gz * rvec[c] * t;
                    }
                }
            }
            g
        });
        let mut out = vec![[0.0; 3]; vertices.len()];
        for (f, g) in self.faces.iter().zip(&per_face) {
            for k in 0..3 {
                let v = f.vertices[k];
                let d = camera.project_adjoint(vertices[v], g[k]);
                for c in 0..3 {
                    out[v][c] += d[c];
                }
            }
        }
        out
    }
}

/// Binary silhouette: a pixel is 1 iff its center lies inside (or on the
/// boundary of) some projected triangle.
pub fn render_hard(camera: &Camera, vertices: &[Vec3], faces: &[[u32; 3]]) -> SilhouetteImage {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let projected = project_faces(camera, vertices, faces, 0.0);
    let rows = faces_by_row(&projected, h);
    let mut pixels = vec![0.0; w * h];
    par::for_each_row(&mut pixels, w, |y, row| {
        let py = y as f64 + 0.5;
        for &fi in &rows[y] {
            let f = &projected[fi];
            let area = cross2(sub2(f.p[1], f.p[0]), sub2(f.p[2], f.p[0]));
            for (x, px) in row.iter_mut().enumerate().take(f.x1 + 1).skip(f.x0) {
                if *px == 1.0 {
                    continue;
                }
                let p = [x as f64 + 0.5, py];
                let inside = (0..3).all(|e| {
                    let a = f.p[e];
                    let b = f.p[(e + 1) % 3];
                    cross2(sub2(b, a), sub2(p, a)) * area >= 0.0
                });
                if inside {
                    *px = 1.0;
                }
            }
        }
    });
    SilhouetteImage::from_raw(w, h, pixels, SilhouetteKind::Hard)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam64() -> Camera {
        Camera::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn empty_mesh_renders_zero() {
        let cam = cam64();
        let soft = render_soft(&cam, &[], &[], 0.5).unwrap();
        assert!(soft.pixels().iter().all(|v| *v == 0.0));
        let hard = render_hard(&cam, &[], &[]);
        assert!(hard.pixels().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pixel_on_edge_gets_half_coverage() {
        let cam = cam64();
        // Edge along the pixel-center line y = 10.5 (in pixels), z = 1.
        let to3 = |u: f64, v: f64| [(u - 32.0) / 64.0, (v - 32.0) / 64.0, 1.0];
        let verts = vec![to3(2.0, 10.5), to3(60.0, 10.5), to3(31.0, 40.0)];
        let img = render_soft(&cam, &verts, &[[0, 1, 2]], 0.3).unwrap();
        assert!((img.get(30, 10) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn large_triangle_saturates_interior() {
        let cam = cam64();
        let verts = vec![[-3.0, -3.0, 1.0], [3.0, -3.0, 1.0], [0.0, 3.0, 1.0]];
        let img = render_soft(&cam, &verts, &[[0, 1, 2]], 1e-3).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert!(img.get(x, y) > 0.99);
            }
        }
    }

    #[test]
    fn behind_camera_faces_are_skipped() {
        let cam = cam64();
        let verts = vec![[-3.0, -3.0, -1.0], [3.0, -3.0, 1.0], [0.0, 3.0, 1.0]];
        let img = render_soft(&cam, &verts, &[[0, 1, 2]], 0.4).unwrap();
        assert!(img.pixels().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn square_quad_matches_analytic_extent() {
        let cam = cam64();
        // Square spanning pixels [20, 44) in both axes at z = 1.
        let to3 = |u: f64, v: f64| [(u - 32.0) / 64.0, (v - 32.0) / 64.0, 1.0];
        let verts = vec![to3(20.0, 20.0), to3(44.0, 20.0), to3(44.0, 44.0), to3(20.0, 44.0)];
        let faces = [[0, 1, 2], [0, 2, 3]];
        let img = render_hard(&cam, &verts, &faces);
        for y in 0..64 {
            for x in 0..64 {
                let want = (20..44).contains(&x) && (20..44).contains(&y);
                assert_eq!(img.get(x, y) == 1.0, want, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn soft_sum_gradient_matches_finite_differences() {
        let cam = cam64();
        let verts = vec![[-0.11, -0.07, 0.9], [0.13, -0.05, 1.1], [0.02, 0.12, 1.0]];
        let faces = [[0u32, 1, 2]];
        let settings = SoftRasterSettings::with_sigma(0.8);
        let out = render_soft_with_cache(&cam, &verts, &faces, settings);
        let g = out.backward(&cam, &verts, &vec![1.0; 64 * 64]);
        let total = |v: &[Vec3]| -> f64 {
            render_soft_with_cache(&cam, v, &faces, settings).image.pixels().iter().sum()
        };
        let h = 1e-5;
        for v in 0..3 {
            for c in 0..3 {
                let mut a = verts.clone();
                a[v][c] += h;
                let mut b = verts.clone();
                b[v][c] -= h;
                let fd = (total(&a) - total(&b)) / (2.0 * h);
                assert!((fd - g[v][c]).abs() <= 0.02 * fd.abs().max(1e-3), "{v},{c}: {} vs {fd}", g[v][c]);
            }
        }
    }
}
