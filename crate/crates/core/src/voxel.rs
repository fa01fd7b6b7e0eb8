//! Workspace voxelization and ray-voxel pair generation.
//!
//! The workspace is split into `n³` axis-aligned cells in camera coordinates.
//! A cell is occupied when at least one valid point falls inside it. For a
//! camera ray, [`generate_pairs`] returns every occupied cell the ray crosses,
//! ordered front to back, with the entry and exit points of the crossing.

use crate::camera::{OrganizedPointCloud, Ray};
use crate::error::{contract, Result};
use crate::geom::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Slab test. Returns `(t_in, t_out)` when the ray meets the box with
/// `t_out > max(t_in, 0)`. Zero direction components are handled with the
/// infinite-slab convention: the ray is inside that slab for all `t` or never.
pub fn ray_aabb(ray: &Ray, b: &Aabb) -> Option<(f32, f32)> {
    let mut t_in = f32::NEG_INFINITY;
    let mut t_out = f32::INFINITY;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.dir[a]);
        if d == 0.0 {
            if o < b.min[a] || o > b.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut t0, mut t1) = ((b.min[a] - o) * inv, (b.max[a] - o) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_in = t_in.max(t0);
        t_out = t_out.min(t1);
    }
    (t_out > t_in.max(0.0)).then_some((t_in, t_out))
}

/// Fixed axis-aligned region in which depth is completed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Workspace {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            min: Vec3::new(-0.5, -0.5, 0.2),
            max: Vec3::new(0.5, 0.5, 1.2),
        }
    }
}

impl Workspace {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).all(|a| min[a] < max[a]) && min.is_finite() && max.is_finite() {
            Ok(Self { min, max })
        } else {
            Err(contract(format!("degenerate workspace {min:?}..{max:?}")))
        }
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::new(self.min, self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.aabb().contains(p)
    }

    /// Maps the workspace onto `[-1, 1]³`.
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        let e = self.extent();
        Vec3::new(
            2.0 * (p.x - self.min.x) / e.x - 1.0,
            2.0 * (p.y - self.min.y) / e.y - 1.0,
            2.0 * (p.z - self.min.z) / e.z - 1.0,
        )
    }
}

/// One occupied voxel crossed by one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayVoxelPair {
    pub ray: Ray,
    /// Flat voxel index in the grid.
    pub voxel: usize,
    /// Index among the grid's occupied voxels.
    pub slot: usize,
    pub t_in: f32,
    pub t_out: f32,
    pub d_in: Vec3,
    pub d_out: Vec3,
}

impl RayVoxelPair {
    pub fn segment_length(&self) -> f32 {
        self.t_out - self.t_in
    }
}

/// How pairs are enumerated; both produce the same pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PairMethod {
    /// Slab test against every occupied voxel.
    #[default]
    Exhaustive,
    /// Grid traversal visiting only the voxels on the ray.
    Traversal,
}

/// Voxelized workspace with occupancy and resident point ids.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    workspace: Workspace,
    n: usize,
    points: Vec<Vec<usize>>,
    occupied: Vec<usize>,
    slots: Vec<u32>,
}

const NO_SLOT: u32 = u32::MAX;

impl VoxelGrid {
    pub fn empty(workspace: Workspace, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(contract("grid resolution must be >= 1"));
        }
        Workspace::new(workspace.min, workspace.max)?;
        let cells = n * n * n;
        Ok(Self {
            workspace,
            n,
            points: vec![Vec::new(); cells],
            occupied: Vec::new(),
            slots: vec![NO_SLOT; cells],
        })
    }

    /// Grid over `(id, point)` pairs. Points outside the workspace are ignored.
    pub fn from_points(
        points: impl IntoIterator<Item = (usize, Vec3)>,
        workspace: Workspace,
        n: usize,
    ) -> Result<Self> {
        let mut grid = Self::empty(workspace, n)?;
        for (id, p) in points {
            if let Some(v) = grid.voxel_of(p) {
                grid.points[v].push(id);
            }
        }
        grid.reindex();
        Ok(grid)
    }

    fn reindex(&mut self) {
        self.occupied = (0..self.points.len()).filter(|&v| !self.points[v].is_empty()).collect();
        self.slots.fill(NO_SLOT);
        for (j, &v) in self.occupied.iter().enumerate() {
            self.slots[v] = j as u32;
        }
    }

    /// Adds one point; returns its voxel when inside the workspace.
    /// Occupancy only ever grows.
    pub fn insert(&mut self, id: usize, p: Vec3) -> Option<usize> {
        let v = self.voxel_of(p)?;
        let was_empty = self.points[v].is_empty();
        self.points[v].push(id);
        if was_empty {
            self.reindex();
        }
        Some(v)
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn num_cells(&self) -> usize {
        self.points.len()
    }

    pub fn cell_size(&self) -> Vec3 {
        self.workspace.extent() * (1.0 / self.n as f32)
    }

    pub fn cell_diagonal(&self) -> f32 {
        self.cell_size().norm()
    }

    pub fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.n + iy) * self.n + ix
    }

    pub fn coords(&self, v: usize) -> [usize; 3] {
        [v % self.n, (v / self.n) % self.n, v / (self.n * self.n)]
    }

    pub fn is_occupied(&self, v: usize) -> bool {
        !self.points[v].is_empty()
    }

    /// Flat indices of occupied voxels, ascending; position = slot.
    pub fn occupied(&self) -> &[usize] {
        &self.occupied
    }

    pub fn num_occupied(&self) -> usize {
        self.occupied.len()
    }

    pub fn slot(&self, v: usize) -> Option<usize> {
        let s = self.slots[v];
        (s != NO_SLOT).then_some(s as usize)
    }

    pub fn points_in(&self, v: usize) -> &[usize] {
        &self.points[v]
    }

    /// Cell coordinate along one axis: `floor((p − min)/cell)`, with points
    /// exactly on the max face assigned to the last cell.
    fn axis_index(&self, p: f32, a: usize) -> Option<usize> {
        let (lo, hi) = (self.workspace.min[a], self.workspace.max[a]);
        if !(p >= lo && p <= hi) {
            return None;
        }
        let f = (p as f64 - lo as f64) / (hi as f64 - lo as f64) * self.n as f64;
        Some((f.floor() as usize).min(self.n - 1))
    }

    /// Voxel containing `p`, or `None` outside the workspace.
    pub fn voxel_of(&self, p: Vec3) -> Option<usize> {
        Some(self.flat(
            self.axis_index(p.x, 0)?,
            self.axis_index(p.y, 1)?,
            self.axis_index(p.z, 2)?,
        ))
    }

    fn boundary(&self, a: usize, i: usize) -> f32 {
        let (lo, hi) = (self.workspace.min[a], self.workspace.max[a]);
        if i >= self.n {
            hi
        } else {
            lo + (hi - lo) * (i as f32 / self.n as f32)
        }
    }

    pub fn voxel_box(&self, v: usize) -> Aabb {
        let c = self.coords(v);
        Aabb::new(
            Vec3::new(self.boundary(0, c[0]), self.boundary(1, c[1]), self.boundary(2, c[2])),
            Vec3::new(
                self.boundary(0, c[0] + 1),
                self.boundary(1, c[1] + 1),
                self.boundary(2, c[2] + 1),
            ),
        )
    }

    pub fn voxel_center(&self, v: usize) -> Vec3 {
        self.voxel_box(v).center()
    }

    fn make_pair(&self, ray: &Ray, v: usize) -> Option<RayVoxelPair> {
        let (t_in, t_out) = ray_aabb(ray, &self.voxel_box(v))?;
        let t_in = t_in.max(0.0);
        Some(RayVoxelPair {
            ray: *ray,
            voxel: v,
            slot: self.slot(v)?,
            t_in,
            t_out,
            d_in: ray.at(t_in),
            d_out: ray.at(t_out),
        })
    }

    /// Voxels along the ray in traversal order (occupied or not).
    pub fn traverse(&self, ray: &Ray) -> Vec<usize> {
        let Some((t0, t1)) = ray_aabb(ray, &self.workspace.aabb()) else {
            return Vec::new();
        };
        let t0 = t0.max(0.0) as f64;
        let t1 = t1 as f64;
        let cell = self.cell_size();
        let mut idx = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        let nudge = (cell.x.min(cell.y).min(cell.z) as f64 * 1e-4).min(0.5 * (t1 - t0));
        let tm = t0 + nudge;
        for a in 0..3 {
            let o = ray.origin[a] as f64;
            let d = ray.dir[a] as f64;
            let lo = self.workspace.min[a] as f64;
            let c = cell[a] as f64;
            let p = o + d * tm;
            let i = (((p - lo) / c).floor() as i64).clamp(0, self.n as i64 - 1);
            idx[a] = i;
            if d > 0.0 {
                step[a] = 1;
                t_max[a] = (self.boundary(a, i as usize + 1) as f64 - o) / d;
                t_delta[a] = c / d;
            } else if d < 0.0 {
                step[a] = -1;
                t_max[a] = (self.boundary(a, i as usize) as f64 - o) / d;
                t_delta[a] = -c / d;
            }
        }
        let mut out = Vec::new();
        loop {
            out.push(self.flat(idx[0] as usize, idx[1] as usize, idx[2] as usize));
            let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[a] >= t1 {
                break;
            }
            idx[a] += step[a];
            if idx[a] < 0 || idx[a] >= self.n as i64 {
                break;
            }
            t_max[a] += t_delta[a];
        }
        out
    }
}

/// Builds the occupancy grid from the valid points of an organized cloud;
/// point ids are pixel indices.
pub fn build_grid(cloud: &OrganizedPointCloud, workspace: Workspace, n: usize) -> Result<VoxelGrid> {
    VoxelGrid::from_points(cloud.valid_points(), workspace, n)
}

/// Every occupied voxel whose slab interval with the ray is non-empty with
/// `t_out > 0`, ordered by `t_in`; intervals start at `t = 0` at the latest.
pub fn generate_pairs(ray: &Ray, grid: &VoxelGrid) -> Vec<RayVoxelPair> {
    if ray_aabb(ray, &grid.workspace.aabb()).is_none() {
        return Vec::new();
    }
    let mut pairs: Vec<_> = grid
        .occupied
        .iter()
        .filter_map(|&v| grid.make_pair(ray, v))
        .collect();
    pairs.sort_by(|a, b| a.t_in.total_cmp(&b.t_in).then(a.t_out.total_cmp(&b.t_out)));
    pairs
}

/// Same result as [`generate_pairs`] via grid traversal.
pub fn generate_pairs_traversal(ray: &Ray, grid: &VoxelGrid) -> Vec<RayVoxelPair> {
    let mut pairs: Vec<_> = grid
        .traverse(ray)
        .into_iter()
        .filter(|&v| grid.is_occupied(v))
        .filter_map(|v| grid.make_pair(ray, v))
        .collect();
    pairs.sort_by(|a, b| a.t_in.total_cmp(&b.t_in).then(a.t_out.total_cmp(&b.t_out)));
    pairs
}

pub fn pairs_for(ray: &Ray, grid: &VoxelGrid, method: PairMethod) -> Vec<RayVoxelPair> {
    match method {
        PairMethod::Exhaustive => generate_pairs(ray, grid),
        PairMethod::Traversal => generate_pairs_traversal(ray, grid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_ws() -> Workspace {
        Workspace::new(Vec3::splat(0.0), Vec3::splat(1.0)).unwrap()
    }

    #[test]
    fn center_point_lands_in_upper_voxel() {
        let grid = VoxelGrid::from_points([(0, Vec3::splat(0.5))], unit_ws(), 2).unwrap();
        assert_eq!(grid.num_occupied(), 1);
        assert_eq!(grid.occupied()[0], grid.flat(1, 1, 1));
    }

    #[test]
    fn max_face_goes_to_last_cell_and_outside_is_ignored() {
        let pts = [(0, Vec3::splat(1.0)), (1, Vec3::new(1.01, 0.5, 0.5)), (2, Vec3::splat(0.0))];
        let grid = VoxelGrid::from_points(pts, unit_ws(), 4).unwrap();
        assert_eq!(grid.points_in(grid.flat(3, 3, 3)), &[0]);
        assert_eq!(grid.points_in(grid.flat(0, 0, 0)), &[2]);
        assert_eq!(grid.num_occupied(), 2);
    }

    #[test]
    fn empty_cloud_has_no_occupied_voxels() {
        let grid = VoxelGrid::from_points(std::iter::empty(), Workspace::default(), 8).unwrap();
        assert_eq!(grid.num_occupied(), 0);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(VoxelGrid::empty(Workspace::default(), 0).is_err());
        let flat = Workspace {
            min: Vec3::splat(0.0),
            max: Vec3::new(1.0, 0.0, 1.0),
        };
        assert!(VoxelGrid::empty(flat, 2).is_err());
    }

    #[test]
    fn random_points_match_brute_force_binning() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ws = Workspace::default();
        let pts: Vec<(usize, Vec3)> = (0..1000)
            .map(|i| {
                let p = Vec3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(0.1..1.3),
                );
                (i, p)
            })
            .collect();
        let grid = VoxelGrid::from_points(pts.iter().copied(), ws, 8).unwrap();
        let want = oracles::brute_force_counts(&pts, &ws, 8);
        for v in 0..grid.num_cells() {
            let [ix, iy, iz] = grid.coords(v);
            assert_eq!(grid.points_in(v).len(), want[ix][iy][iz], "voxel {v}");
            assert_eq!(grid.is_occupied(v), want[ix][iy][iz] > 0);
        }
    }

    #[test]
    fn insert_never_deoccupies() {
        let mut grid = VoxelGrid::from_points([(0, Vec3::splat(0.1))], unit_ws(), 4).unwrap();
        let before: Vec<usize> = grid.occupied().to_vec();
        grid.insert(1, Vec3::splat(0.9));
        for v in before {
            assert!(grid.is_occupied(v));
        }
        assert_eq!(grid.num_occupied(), 2);
    }

    #[test]
    fn slab_examples() {
        let b = Aabb::new(Vec3::splat(0.0), Vec3::splat(1.0));
        let hit = ray_aabb(&Ray::new(Vec3::new(0.5, 0.5, -1.0), Vec3::new(0.0, 0.0, 1.0)), &b);
        assert_eq!(hit, Some((1.0, 2.0)));
        assert!(ray_aabb(&Ray::new(Vec3::new(2.0, 2.0, -1.0), Vec3::new(0.0, 0.0, 1.0)), &b).is_none());
        let diag = Ray::new(Vec3::splat(-1.0), Vec3::splat(1.0));
        let (t0, t1) = ray_aabb(&diag, &b).unwrap();
        assert!((t0 - 3f32.sqrt()).abs() < 1e-6);
        assert!((diag.at(t0) - Vec3::ZERO).norm() < 1e-6);
        assert!((diag.at(t1) - Vec3::splat(1.0)).norm() < 1e-6);
    }

    #[test]
    fn ray_behind_box_misses() {
        let b = Aabb::new(Vec3::splat(0.0), Vec3::splat(1.0));
        assert!(ray_aabb(&Ray::new(Vec3::new(0.5, 0.5, 2.0), Vec3::new(0.0, 0.0, 1.0)), &b).is_none());
    }

    #[test]
    fn single_occupied_voxel_gives_one_pair() {
        let ws = Workspace::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 1.0, 2.0)).unwrap();
        let grid = VoxelGrid::from_points([(0, Vec3::new(0.1, 0.2, 1.3))], ws, 2).unwrap();
        let ray = Ray::new(Vec3::new(0.25, 0.25, 0.0), Vec3::new(0.0, 0.0, 1.0));
        let pairs = generate_pairs(&ray, &grid);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].t_in, pairs[0].t_out), (1.0, 1.5));
        assert_eq!(pairs[0].d_in, Vec3::new(0.25, 0.25, 1.0));
        assert_eq!(pairs[0].slot, 0);
        let miss = Ray::new(Vec3::new(0.75, 0.75, 0.0), Vec3::new(0.0, 0.0, 1.0));
        assert!(generate_pairs(&miss, &grid).is_empty());
    }

    #[test]
    fn origin_inside_voxel_truncates_at_zero() {
        let grid = VoxelGrid::from_points([(0, Vec3::splat(0.5))], unit_ws(), 1).unwrap();
        let ray = Ray::new(Vec3::splat(0.5), Vec3::new(0.0, 0.0, 1.0));
        let pairs = generate_pairs(&ray, &grid);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].t_in, 0.0);
        assert_eq!(pairs[0].t_out, 0.5);
    }

    #[test]
    fn traversal_agrees_with_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ws = Workspace::default();
        let pts: Vec<(usize, Vec3)> = (0..300)
            .map(|i| {
                (
                    i,
                    Vec3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(0.2..1.2),
                    ),
                )
            })
            .collect();
        let grid = VoxelGrid::from_points(pts, ws, 8).unwrap();
        for _ in 0..500 {
            let ray = oracles::random_ray(&mut rng, &ws);
            let a = generate_pairs(&ray, &grid);
            let b = generate_pairs_traversal(&ray, &grid);
            let keep = |p: &&RayVoxelPair| p.segment_length() > 1e-5;
            let a: Vec<_> = a.iter().filter(keep).collect();
            let b: Vec<_> = b.iter().filter(keep).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pair_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ws = Workspace::default();
        let pts: Vec<(usize, Vec3)> = (0..400)
            .map(|i| {
                (
                    i,
                    Vec3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(0.2..1.2),
                    ),
                )
            })
            .collect();
        let grid = VoxelGrid::from_points(pts, ws, 4).unwrap();
        for _ in 0..300 {
            let ray = oracles::random_ray(&mut rng, &ws);
            let pairs = generate_pairs(&ray, &grid);
            for w in pairs.windows(2) {
                assert!(w[0].t_out <= w[1].t_in + 1e-6);
            }
            for p in &pairs {
                assert!(p.t_in < p.t_out && p.t_in >= 0.0);
                assert!(grid.is_occupied(p.voxel));
                let b = grid.voxel_box(p.voxel);
                for q in [p.d_in, p.d_out] {
                    let inside = (0..3).all(|a| q[a] >= b.min[a] - 1e-6 && q[a] <= b.max[a] + 1e-6);
                    let on_face = (0..3).any(|a| (q[a] - b.min[a]).abs() < 1e-6 || (q[a] - b.max[a]).abs() < 1e-6);
                    assert!(inside && (on_face || p.t_in == 0.0));
                }
            }
        }
    }
}
