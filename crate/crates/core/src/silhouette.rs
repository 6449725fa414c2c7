//! Silhouette images and their PNG / binary PGM encodings.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SilhouetteKind {
    Soft,
    Hard,
}

/// Row-major `height x width` grid with values in `[0, 1]`, origin top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    kind: SilhouetteKind,
}

impl SilhouetteImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, kind: SilhouetteKind) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim("pixels", width * height, pixels.len()));
        }
        match kind {
            SilhouetteKind::Soft => {
                if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::invariant("pixels", format!("soft value {v} outside [0, 1]")));
                }
            }
            SilhouetteKind::Hard => {
                if let Some(v) = pixels.iter().find(|v| **v != 0.0 && **v != 1.0) {
                    return Err(Error::invariant("pixels", format!("hard value {v} not in {{0, 1}}")));
                }
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
            kind,
        })
    }

    pub(crate) fn from_raw(width: usize, height: usize, pixels: Vec<f64>, kind: SilhouetteKind) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
            kind,
        }
    }

    pub fn zeros(width: usize, height: usize, kind: SilhouetteKind) -> Self {
        Self::from_raw(width, height, vec![0.0; width * height], kind)
    }

    /// Hard mask from booleans.
    pub fn from_bools(width: usize, height: usize, mask: &[bool]) -> Result<Self> {
        Self::new(
            width,
            height,
            mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            SilhouetteKind::Hard,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kind(&self) -> SilhouetteKind {
        self.kind
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Hard mask of pixels `>= threshold`.
    pub fn threshold(&self, threshold: f64) -> Self {
        Self::from_raw(
            self.width,
            self.height,
            self.pixels
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
            SilhouetteKind::Hard,
        )
    }

    pub fn count_foreground(&self) -> usize {
        self.pixels.iter().filter(|v| **v >= 0.5).count()
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` of pixels `>= 0.5`.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) >= 0.5 {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    fn to_gray(&self) -> GrayImage {
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for (i, v) in self.pixels.iter().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            img.put_pixel(x, y, Luma([(255.0 * v).round().clamp(0.0, 255.0) as u8]));
        }
        img
    }

    fn from_gray(img: &GrayImage) -> Self {
        let pixels = img
            .pixels()
            .map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 })
            .collect();
        Self::from_raw(img.width() as usize, img.height() as usize, pixels, SilhouetteKind::Hard)
    }

    /// 8-bit grayscale PNG bytes with value `round(255 * v)`.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        self.to_gray()
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out.into_inner()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Binary (P5) PGM bytes.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_gray().into_raw());
        out
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a PNG or PGM mask; foreground is `>= 128`.
    pub fn load_mask(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::mask_from_bytes(&bytes).map_err(|msg| Error::Image {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn mask_from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
        Ok(Self::from_gray(&img.to_luma8()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_out_of_range_values() {
        assert!(SilhouetteImage::new(2, 2, vec![0.0, 0.5, 1.0, 1.2], SilhouetteKind::Soft).is_err());
        assert!(SilhouetteImage::new(2, 2, vec![0.0, 0.5, 1.0, 1.0], SilhouetteKind::Hard).is_err());
        assert!(SilhouetteImage::new(2, 2, vec![0.0; 3], SilhouetteKind::Hard).is_err());
    }

    #[test]
    fn png_and_pgm_round_trip_hard_masks() {
        let mask: Vec<bool> = (0..80).map(|i| i % 3 == 0 || i % 7 == 1).collect();
        let img = SilhouetteImage::from_bools(10, 8, &mask).unwrap();
        let png = SilhouetteImage::mask_from_bytes(&img.to_png_bytes()).unwrap();
        assert_eq!(png, img);
        let pgm = SilhouetteImage::mask_from_bytes(&img.to_pgm_bytes()).unwrap();
        assert_eq!(pgm, img);
    }

    #[test]
    fn soft_png_quantizes_and_thresholds_at_128() {
        let soft = SilhouetteImage::new(4, 2, vec![0.0, 0.2, 0.49, 0.5, 0.51, 0.8, 1.0, 0.1], SilhouetteKind::Soft)
            .unwrap();
        let back = SilhouetteImage::mask_from_bytes(&soft.to_png_bytes()).unwrap();
        // round(255 * 0.5) = 128 counts as foreground.
        assert_eq!(back.pixels(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    }
}
