//! Contour extraction, exact Euclidean distance transform and the
//! differentiable binarize → Laplacian → relu → tanh contour pipeline.

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::logistic;
use crate::par;
use crate::silhouette::{SilhouetteImage, SilhouetteKind};

/// Slope of the differentiable binarization.
pub const BINARIZE_SLOPE: f64 = 100.0;

/// Per-pixel Euclidean distance (in pixels) to the nearest contour pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dim("dfield values", width * height, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::invariant("dfield values", format!("{v} is not a finite nonnegative distance")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `u32` LE width, `u32` LE height, then `f32` LE values row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        write_f32_grid(self.width, self.height, &self.values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, h, values) = read_f32_grid(bytes)?;
        Self::new(w, h, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Encodes a row-major `f32` grid with the 8-byte `.dfield` header.
pub fn write_f32_grid(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes a `.dfield`-style grid into `(width, height, values)`.
pub fn read_f32_grid(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 8 {
        return Err(Error::Parse {
            field: "dfield header".into(),
            msg: format!("need 8 bytes, found {}", bytes.len()),
        });
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * w * h {
        return Err(Error::dim("dfield body bytes", 4 * w * h, body.len()));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((w, h, values))
}

/// Foreground pixels with at least one background 4-neighbor; the frame
/// outside the image counts as background. Returned as `(x, y)` in
/// row-major order.
pub fn contour_of_binary(mask: &SilhouetteImage) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let fg = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask.get(x as usize, y as usize) >= 0.5
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(x, y) && !(fg(x - 1, y) && fg(x + 1, y) && fg(x, y - 1) && fg(x, y + 1)) {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

/// 1-D squared distance transform by lower envelope of parabolas.
/// `f` holds sampled costs (`INF` for non-sites); `d` receives the result.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    // Skip leading infinite sites so every parabola in the envelope is real.
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        let intersect = |p: usize| {
            let pf = p as f64;
            ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
        };
        // z[0] = -inf, so this stops at k = 0.
        let mut s = intersect(v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for (q, out) in d.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *out = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest point in
/// `contour`. The squared distances are computed exactly (integer-valued
/// in `f64`), so the result is `sqrt` of an exact integer.
pub fn distance_transform(contour: &[(usize, usize)], width: usize, height: usize) -> Result<DistanceField> {
    if contour.is_empty() {
        return Err(Error::EmptyContour);
    }
    if width == 0 || height == 0 {
        return Err(Error::invariant("distance_transform", "image must be nonempty"));
    }
    let mut grid = vec![f64::INFINITY; width * height];
    for &(x, y) in contour {
        if x >= width || y >= height {
            return Err(Error::invariant("contour", format!("pixel ({x}, {y}) outside {width}x{height}")));
        }
        grid[y * width + x] = 0.0;
    }
    // Columns: transform each column independently.
    let columns: Vec<Vec<f64>> = par::map_range(width, |x| {
        let f: Vec<f64> = (0..height).map(|y| grid[y * width + x]).collect();
        let mut d = vec![0.0; height];
        let mut v = vec![0usize; height];
        let mut z = vec![0.0; height + 1];
        edt_1d(&f, &mut d, &mut v, &mut z);
        d
    });
    for (x, col) in columns.iter().enumerate() {
        for (y, val) in col.iter().enumerate() {
            grid[y * width + x] = *val;
        }
    }
    // Rows.
    par::for_each_row(&mut grid, width, |_, row| {
        let f = row.to_vec();
        let mut v = vec![0usize; width];
        let mut z = vec![0.0; width + 1];
        edt_1d(&f, row, &mut v, &mut z);
    });
    for g in &mut grid {
        *g = g.sqrt();
    }
    Ok(DistanceField {
        width,
        height,
        values: grid,
    })
}

/// Distance field to the contour of a hard mask.
pub fn distance_field_of_mask(mask: &SilhouetteImage) -> Result<DistanceField> {
    distance_transform(&contour_of_binary(mask), mask.width(), mask.height())
}

/// `1 / (1 + exp(-100 (x - 0.5)))` for a single value.
#[inline]
pub fn soft_binarize_value(x: f64) -> f64 {
    logistic(BINARIZE_SLOPE * (x - 0.5))
}

/// Pointwise steep logistic centered at 0.5.
pub fn soft_binarize(image: &SilhouetteImage) -> SilhouetteImage {
    let px = image.pixels().iter().map(|&x| soft_binarize_value(x)).collect();
    SilhouetteImage::from_raw(image.width(), image.height(), px, SilhouetteKind::Soft)
}

/// 5-point Laplacian with zero padding. Symmetric, so it is its own adjoint.
pub fn laplacian(values: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    par::for_each_row(&mut out, width, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            // Sum of (neighbor - center), with zeros outside the frame, so a
            // constant patch yields exactly 0.
            let c = values[y * width + x];
            let at = |xx: usize, yy: usize| values[yy * width + xx] - c;
            let mut s = 0.0;
            s += if x > 0 { at(x - 1, y) } else { -c };
            s += if x + 1 < width { at(x + 1, y) } else { -c };
            s += if y > 0 { at(x, y - 1) } else { -c };
            s += if y + 1 < height { at(x, y + 1) } else { -c };
            *o = s;
        }
    });
    out
}

/// `tanh(max(Laplacian(image), 0))`.
pub fn soft_contour(binarized: &SilhouetteImage) -> SilhouetteImage {
    let (w, h) = (binarized.width(), binarized.height());
    let px = laplacian(binarized.pixels(), w, h)
        .into_iter()
        .map(|l| l.max(0.0).tanh())
        .collect();
    SilhouetteImage::from_raw(w, h, px, SilhouetteKind::Soft)
}

/// 1 inside the image, 0 within `k` rows/columns of the frame.
pub fn border_band_mask(width: usize, height: usize, k: usize) -> Vec<f64> {
    let mut out = vec![1.0; width * height];
    if k == 0 {
        return out;
    }
    for y in 0..height {
        for x in 0..width {
            if x < k || y < k || x + k >= width || y + k >= height {
                out[y * width + x] = 0.0;
            }
        }
    }
    out
}

/// Contour term together with what its adjoint needs.
#[derive(Debug, Clone)]
pub struct ContourEval {
    pub value: f64,
    /// Gradient with respect to the rendered (pre-binarization) pixels.
    pub grad: Vec<f64>,
}

/// `sum band * tanh(relu(Lap(binarize(rendered)))) * dfield` and its
/// gradient with respect to `rendered`. The relu uses the subgradient 0 at
/// the kink.
pub fn contour_term(rendered: &[f64], width: usize, height: usize, dfield: &DistanceField, border_band: usize) -> ContourEval {
    let b: Vec<f64> = rendered.iter().map(|&x| soft_binarize_value(x)).collect();
    let lap = laplacian(&b, width, height);
    let band = border_band_mask(width, height, border_band);
    let mut value = 0.0;
    let mut g_lap = vec![0.0; width * height];
    for i in 0..width * height {
        if lap[i] > 0.0 && band[i] != 0.0 {
            let t = lap[i].tanh();
            let wgt = band[i] * dfield.values[i];
            value += wgt * t;
            g_lap[i] = wgt * (1.0 - t * t);
        }
    }
    let g_b = laplacian(&g_lap, width, height);
    let grad = g_b
        .iter()
        .zip(&b)
        .map(|(g, bv)| g * BINARIZE_SLOPE * bv * (1.0 - bv))
        .collect();
    ContourEval { value, grad }
}
