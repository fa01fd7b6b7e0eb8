//! Random tabletop scenes: a tilted support plane with primitives resting on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SynthConfig;
use crate::camera::CameraIntrinsics;
use crate::geom::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f32 },
    /// Half extents along the local axes.
    Box { half: Vec3 },
    /// Axis along the local third axis.
    Cylinder { radius: f32, half_height: f32 },
}

/// A primitive with an orthonormal frame `axes` (columns of its rotation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub center: Vec3,
    pub axes: [Vec3; 3],
    pub albedo: [f32; 3],
    pub transparent: bool,
}

impl Object {
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let d = p - self.center;
        Vec3::new(d.dot(self.axes[0]), d.dot(self.axes[1]), d.dot(self.axes[2]))
    }

    pub fn to_world_dir(&self, v: Vec3) -> Vec3 {
        self.axes[0] * v.x + self.axes[1] * v.y + self.axes[2] * v.z
    }

    /// Radius of a sphere around `center` enclosing the object.
    pub fn bounding_radius(&self) -> f32 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => half.norm(),
            Shape::Cylinder { radius, half_height } => (radius * radius + half_height * half_height).sqrt(),
        }
    }

    /// Closed-set membership test.
    pub fn contains(&self, p: Vec3) -> bool {
        let q = self.to_local(p);
        match self.shape {
            Shape::Sphere { radius } => q.dot(q) <= radius * radius,
            Shape::Box { half } => q.x.abs() <= half.x && q.y.abs() <= half.y && q.z.abs() <= half.z,
            Shape::Cylinder { radius, half_height } => {
                q.x * q.x + q.y * q.y <= radius * radius && q.z.abs() <= half_height
            }
        }
    }

    /// Corner points of a bounding box in world coordinates.
    pub fn bounding_corners(&self) -> Vec<Vec3> {
        let half = match self.shape {
            Shape::Sphere { radius } => Vec3::splat(radius),
            Shape::Box { half } => half,
            Shape::Cylinder { radius, half_height } => Vec3::new(radius, radius, half_height),
        };
        let mut out = Vec::with_capacity(8);
        for k in 0..8 {
            let s = |a: usize| if k >> a & 1 == 0 { -1.0 } else { 1.0 };
            let local = Vec3::new(s(0) * half.x, s(1) * half.y, s(2) * half.z);
            out.push(self.center + self.to_world_dir(local));
        }
        out
    }
}

/// Support plane `z = depth − y·tan(tilt)`, i.e. `normal·p = offset` with
/// `normal = (0, sin, cos)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    /// Distance from the camera along the optical axis.
    pub depth: f32,
    /// Tilt about the camera x axis, radians.
    pub tilt: f32,
    pub albedo: [[f32; 3]; 2],
    /// Checker period in meters.
    pub checker: f32,
}

impl Plane {
    pub fn normal(&self) -> Vec3 {
        Vec3::new(0.0, self.tilt.sin(), self.tilt.cos())
    }

    pub fn offset(&self) -> f32 {
        self.depth * self.tilt.cos()
    }

    /// Unit normal on the camera side.
    pub fn up(&self) -> Vec3 {
        -self.normal()
    }

    pub fn behind(&self, p: Vec3) -> bool {
        self.normal().dot(p) >= self.offset()
    }

    pub fn albedo_at(&self, p: Vec3) -> [f32; 3] {
        let n = self.normal();
        let e1 = Vec3::new(1.0, 0.0, 0.0);
        let e2 = n.cross(e1);
        let a = (p.dot(e1) / self.checker).floor() as i64;
        let b = (p.dot(e2) / self.checker).floor() as i64;
        self.albedo[((a + b).rem_euclid(2)) as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub plane: Plane,
    pub objects: Vec<Object>,
    /// Unit vector from surfaces towards the light.
    pub light: Vec3,
    pub seed: u64,
}

fn random_color(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Deterministic random scene for `seed`.
pub fn generate_scene(cfg: &SynthConfig, k: &CameraIntrinsics, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = Plane {
        depth: rng.random_range(cfg.plane_depth_min..=cfg.plane_depth_max),
        tilt: rng.random_range(0.0..=cfg.tilt_max_deg).to_radians(),
        albedo: [random_color(&mut rng, 0.3, 0.9), random_color(&mut rng, 0.3, 0.9)],
        checker: rng.random_range(0.03..0.08),
    };
    let light = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0).normalize();

    let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let transparent = rng.random_range(1..=cfg.transparent_max.min(count).max(1));
    let mut objects: Vec<Object> = Vec::with_capacity(count);
    let up = plane.up();
    let mut attempts = 0;
    while objects.len() < count && attempts < 1000 {
        attempts += 1;
        // Late attempts fall back to the smallest size so crowded or close
        // planes still receive their objects.
        let shrink = attempts > 500;
        let size = |rng: &mut ChaCha8Rng| {
            let s = rng.random_range(cfg.size_min..=cfg.size_max);
            if shrink { cfg.size_min } else { s }
        };
        let shape = match rng.random_range(0..3) {
            0 => Shape::Sphere { radius: 0.5 * size(&mut rng) },
            1 => Shape::Box {
                half: Vec3::new(size(&mut rng), size(&mut rng), size(&mut rng)) * 0.5,
            },
            _ => Shape::Cylinder {
                radius: 0.5 * size(&mut rng),
                half_height: 0.5 * size(&mut rng),
            },
        };
        // Resting frame: third axis along the plane's up normal, spun about it.
        let spin: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let e1 = Vec3::new(1.0, 0.0, 0.0);
        let e2 = up.cross(e1).normalize();
        let a0 = e1 * spin.cos() + e2 * spin.sin();
        let a1 = up.cross(a0);
        let lift = match shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => half.z,
            Shape::Cylinder { half_height, .. } => half_height,
        };
        let u = rng.random_range(0.15..0.85) * k.width as f32;
        let v = rng.random_range(0.15..0.85) * k.height as f32;
        let dir = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let t = plane.offset() / plane.normal().dot(dir);
        let foot = dir * t;
        let obj = Object {
            shape,
            center: foot + up * lift,
            axes: [a0, a1, up],
            albedo: random_color(&mut rng, 0.1, 0.95),
            transparent: objects.len() < transparent,
        };
        let inside_image = obj.bounding_corners().iter().all(|&c| {
            let (pu, pv) = k.project(c);
            c.z > 0.05 && pu >= 0.0 && pv >= 0.0 && pu <= (k.width - 1) as f32 && pv <= (k.height - 1) as f32
        });
        let separated = objects
            .iter()
            .all(|o| (o.center - obj.center).norm() > o.bounding_radius() + obj.bounding_radius());
        if inside_image && separated {
            objects.push(obj);
        }
    }
    Scene {
        plane,
        objects,
        light,
        seed,
    }
}
