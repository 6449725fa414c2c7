//! Pinhole camera: x right, y down, looking down +z. Pixel `(col, row)`
//! covers `[col, col+1) x [row, row+1)`, so its center is at `+0.5`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Centered camera whose focal length is 1.2x the larger image side.
    pub fn default_for_size(width: u32, height: u32) -> Self {
        let f = 1.2 * width.max(height) as f64;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(Error::invariant("fx", "must be positive and finite"));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::invariant("fy", "must be positive and finite"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invariant("cx/cy", "must be finite"));
        }
        if self.width < 8 {
            return Err(Error::invariant("width", "must be at least 8"));
        }
        if self.height < 8 {
            return Err(Error::invariant("height", "must be at least 8"));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cam: Camera = serde_json::from_str(&text).map_err(|e| Error::Parse {
            field: "camera".into(),
            msg: e.to_string(),
        })?;
        cam.validate()?;
        Ok(cam)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("camera serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Projects a camera-space point to pixel coordinates.
    pub fn project(&self, point: Vec3) -> Result<[f64; 2]> {
        self.project_vertex(0, point)
    }

    /// As [`Camera::project`], naming `vertex` in the depth error.
    pub fn project_vertex(&self, vertex: usize, point: Vec3) -> Result<[f64; 2]> {
        if !(point[2] > 0.0) {
            return Err(Error::NonPositiveDepth {
                vertex,
                z: point[2],
            });
        }
        Ok(self.project_unchecked(point))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: Vec3) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }

    /// Chains a pixel-space gradient back to camera space at `p`.
    #[inline]
    pub(crate) fn project_adjoint(&self, p: Vec3, g: [f64; 2]) -> Vec3 {
        let iz = 1.0 / p[2];
        let gx = g[0] * self.fx * iz;
        let gy = g[1] * self.fy * iz;
        [gx, gy, -(gx * p[0] + gy * p[1]) * iz]
    }

    /// Back-projects a pixel coordinate at depth `z`.
    pub fn unproject(&self, uv: [f64; 2], z: f64) -> Vec3 {
        [(uv[0] - self.cx) * z / self.fx, (uv[1] - self.cy) * z / self.fy, z]
    }
}
