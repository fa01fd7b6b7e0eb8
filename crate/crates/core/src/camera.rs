//! Pinhole camera model: back-projection, per-pixel rays and normals.
//!
//! Pixel `(u, v)` refers to the pixel center at integer coordinates.

use crate::error::{contract, Result};
use crate::geom::Vec3;
use crate::image::DepthImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f32, fy: f32, cx: f32, cy: f32, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with focal length `1.25 · width` and a centered principal point.
    pub fn centered(width: usize, height: usize) -> Self {
        let f = 1.25 * width as f32;
        Self {
            fx: f,
            fy: f,
            cx: (width as f32 - 1.0) / 2.0,
            cy: (height as f32 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f32
            && self.cy > 0.0
            && self.cy < self.height as f32;
        if ok {
            Ok(())
        } else {
            Err(contract(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Scales the intrinsics to another resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f32 / self.width as f32;
        let sy = height as f32 / self.height as f32;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    /// Perspective projection of a camera-frame point to pixel coordinates.
    pub fn project(&self, p: Vec3) -> (f32, f32) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// A camera ray with unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self {
            origin,
            dir: dir.normalize(),
        }
    }

    pub fn at(&self, t: f32) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// H×W grid of camera-frame points; `valid[i]` iff the source depth was > 0.
#[derive(Clone, Debug, PartialEq)]
pub struct OrganizedPointCloud {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl OrganizedPointCloud {
    pub fn point(&self, u: usize, v: usize) -> Option<Vec3> {
        let i = v * self.width + u;
        self.valid[i].then(|| self.points[i])
    }

    /// `(pixel index, point)` for every valid pixel, in pixel order.
    pub fn valid_points(&self) -> impl Iterator<Item = (usize, Vec3)> + '_ {
        self.points
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter(|(_, (_, &ok))| ok)
            .map(|(i, (&p, _))| (i, p))
    }
}

pub fn backproject(depth: &DepthImage, k: &CameraIntrinsics) -> Result<OrganizedPointCloud> {
    if depth.width != k.width || depth.height != k.height {
        return Err(contract(format!(
            "depth is {}x{} but intrinsics are {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    let mut points = Vec::with_capacity(depth.len());
    let mut valid = Vec::with_capacity(depth.len());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.get(u, v);
            if z > 0.0 {
                points.push(Vec3::new(
                    (u as f32 - k.cx) * z / k.fx,
                    (v as f32 - k.cy) * z / k.fy,
                    z,
                ));
                valid.push(true);
            } else {
                points.push(Vec3::ZERO);
                valid.push(false);
            }
        }
    }
    Ok(OrganizedPointCloud {
        width: depth.width,
        height: depth.height,
        points,
        valid,
    })
}

/// Unnormalized direction `((u−cx)/fx, (v−cy)/fy, 1)`; no bounds check.
pub fn pixel_direction(u: usize, v: usize, k: &CameraIntrinsics) -> Vec3 {
    Vec3::new((u as f32 - k.cx) / k.fx, (v as f32 - k.cy) / k.fy, 1.0)
}

pub fn pixel_ray(u: usize, v: usize, k: &CameraIntrinsics) -> Result<Ray> {
    if u >= k.width || v >= k.height {
        return Err(contract(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            k.width, k.height
        )));
    }
    Ok(Ray::new(Vec3::ZERO, pixel_direction(u, v, k)))
}

/// Per-pixel unit normals facing the camera.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vec3>,
    pub valid: Vec<bool>,
}

/// Smallest cross-product norm for which a normal is emitted.
pub const NORMAL_EPS: f64 = 1e-9;

/// Normal at one pixel from central differences, or `None` when any of the
/// four neighbors (or the pixel itself) is invalid or the patch is degenerate.
pub fn normal_at(cloud: &OrganizedPointCloud, u: usize, v: usize) -> Option<Vec3> {
    if u == 0 || v == 0 || u + 1 >= cloud.width || v + 1 >= cloud.height {
        return None;
    }
    let c = cloud.point(u, v)?;
    let right = cloud.point(u + 1, v)?;
    let left = cloud.point(u - 1, v)?;
    let down = cloud.point(u, v + 1)?;
    let up = cloud.point(u, v - 1)?;
    let d = |a: Vec3, b: Vec3| [(a.x - b.x) as f64, (a.y - b.y) as f64, (a.z - b.z) as f64];
    let a = d(right, left);
    let b = d(down, up);
    let n = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len < NORMAL_EPS {
        return None;
    }
    let mut n = [n[0] / len, n[1] / len, n[2] / len];
    let facing = n[0] * c.x as f64 + n[1] * c.y as f64 + n[2] * c.z as f64;
    if facing > 0.0 {
        n = [-n[0], -n[1], -n[2]];
    }
    Some(Vec3::new(n[0] as f32, n[1] as f32, n[2] as f32))
}

pub fn estimate_normals(cloud: &OrganizedPointCloud) -> NormalMap {
    let n = cloud.width * cloud.height;
    let mut normals = vec![Vec3::ZERO; n];
    let mut valid = vec![false; n];
    for v in 0..cloud.height {
        for u in 0..cloud.width {
            if let Some(nm) = normal_at(cloud, u, v) {
                normals[v * cloud.width + u] = nm;
                valid[v * cloud.width + u] = true;
            }
        }
    }
    NormalMap {
        width: cloud.width,
        height: cloud.height,
        normals,
        valid,
    }
}
