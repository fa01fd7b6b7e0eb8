//! Independent reference implementations used by the test suites.
//!
//! Everything here trades speed for obviousness: brute-force binning,
//! dense ray sampling with bisection, a separately written grid walk, and a
//! central finite-difference gradient check.

use rand::Rng;

use crate::camera::Ray;
use crate::error::Result;
use crate::geom::Vec3;
use crate::nn::{Graph, Module, Var};
use crate::voxel::Workspace;

/// Per-cell point counts `[ix][iy][iz]` by classifying each point on its own.
pub fn brute_force_counts(points: &[(usize, Vec3)], ws: &Workspace, n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut counts = vec![vec![vec![0usize; n]; n]; n];
    for (_, p) in points {
        if let Some([ix, iy, iz]) = cell_of(*p, ws, n) {
            counts[ix][iy][iz] += 1;
        }
    }
    counts
}

fn cell_of(p: Vec3, ws: &Workspace, n: usize) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let (lo, hi, x) = (ws.min[a] as f64, ws.max[a] as f64, p[a] as f64);
        if x < lo || x > hi {
            return None;
        }
        let mut i = 0;
        // Linear scan over cell lower bounds instead of a division.
        for k in 0..n {
            if x >= lo + (hi - lo) * k as f64 / n as f64 {
                i = k;
            }
        }
        out[a] = i;
    }
    Some(out)
}

/// Camera-like ray: origin near the camera center (sometimes inside the
/// workspace), pointing towards a jittered target in front of it.
pub fn random_ray(rng: &mut impl Rng, ws: &Workspace) -> Ray {
    let e = ws.extent();
    let origin = Vec3::new(
        rng.random_range(-0.3..0.3) * e.x,
        rng.random_range(-0.3..0.3) * e.y,
        ws.min.z + rng.random_range(-0.4..0.3) * e.z,
    );
    loop {
        let target = Vec3::new(
            ws.min.x + rng.random_range(-0.2..1.2) * e.x,
            ws.min.y + rng.random_range(-0.2..1.2) * e.y,
            ws.min.z + rng.random_range(0.0..1.2) * e.z,
        );
        if target.z > origin.z + 0.05 * e.z {
            return Ray::new(origin, target - origin);
        }
    }
}

/// One voxel crossing found by an oracle: flat index `(iz*n+iy)*n+ix`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossing {
    pub voxel: usize,
    pub t_in: f64,
    pub t_out: f64,
}

fn flat(c: [usize; 3], n: usize) -> usize {
    (c[2] * n + c[1]) * n + c[0]
}

fn point_at(ray: &Ray, t: f64) -> [f64; 3] {
    let o = ray.origin.to_array();
    let d = ray.dir.to_array();
    [o[0] as f64 + t * d[0] as f64, o[1] as f64 + t * d[1] as f64, o[2] as f64 + t * d[2] as f64]
}

fn cell_of_f64(p: [f64; 3], ws: &Workspace, n: usize) -> Option<usize> {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let (lo, hi) = (ws.min[a] as f64, ws.max[a] as f64);
        if p[a] < lo || p[a] > hi {
            return None;
        }
        c[a] = (((p[a] - lo) / (hi - lo) * n as f64).floor() as usize).min(n - 1);
    }
    Some(flat(c, n))
}

/// Voxel sequence along a ray from `t = 0` by sampling every `cell/100` and
/// locating each change of cell by recursive bisection.
pub fn dense_sampling_crossings(ray: &Ray, ws: &Workspace, n: usize) -> Vec<Crossing> {
    let e = ws.extent();
    let cell = (e.x.min(e.y).min(e.z) as f64) / n as f64;
    let step = cell / 100.0;
    let o = ray.origin;
    let far = (0..8)
        .map(|k| {
            let pick = |a: usize| if k >> a & 1 == 0 { ws.min[a] } else { ws.max[a] };
            (Vec3::new(pick(0), pick(1), pick(2)) - o).norm() as f64
        })
        .fold(0.0, f64::max)
        + cell;
    let look = |t: f64| cell_of_f64(point_at(ray, t), ws, n);

    let mut changes: Vec<(f64, Option<usize>)> = Vec::new();
    let mut t_prev = 0.0;
    let mut v_prev = look(0.0);
    let steps = (far / step).ceil() as usize;
    for k in 1..=steps {
        let t = k as f64 * step;
        let v = look(t);
        if v != v_prev {
            locate(&look, t_prev, v_prev, t, v, &mut changes);
        }
        t_prev = t;
        v_prev = v;
    }

    let mut out = Vec::new();
    let mut cur = look(0.0).map(|v| (v, 0.0));
    for (t, next) in changes {
        if let Some((v, t0)) = cur {
            out.push(Crossing { voxel: v, t_in: t0, t_out: t });
        }
        cur = next.map(|v| (v, t));
    }
    out
}

fn locate(
    look: &impl Fn(f64) -> Option<usize>,
    ta: f64,
    va: Option<usize>,
    tb: f64,
    vb: Option<usize>,
    out: &mut Vec<(f64, Option<usize>)>,
) {
    if va == vb {
        return;
    }
    if tb - ta < 1e-11 {
        out.push((0.5 * (ta + tb), vb));
        return;
    }
    let tm = 0.5 * (ta + tb);
    let vm = look(tm);
    locate(look, ta, va, tm, vm, out);
    locate(look, tm, vm, tb, vb, out);
}

/// Classic incremental grid walk over all cells, written from scratch in
/// f64. Returns crossings with their parameter intervals, clipped at `t = 0`.
pub fn dda_crossings(ray: &Ray, ws: &Workspace, n: usize) -> Vec<Crossing> {
    let o = ray.origin.to_array().map(|v| v as f64);
    let d = ray.dir.to_array().map(|v| v as f64);
    let lo = ws.min.to_array().map(|v| v as f64);
    let hi = ws.max.to_array().map(|v| v as f64);

    let (mut t_enter, mut t_exit) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return Vec::new();
            }
        } else {
            let (t1, t2) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
            t_enter = t_enter.max(t1.min(t2));
            t_exit = t_exit.min(t1.max(t2));
        }
    }
    if t_exit <= t_enter {
        return Vec::new();
    }

    let size: [f64; 3] = std::array::from_fn(|a| (hi[a] - lo[a]) / n as f64);
    let mid = t_enter + 1e-9f64.min(0.5 * (t_exit - t_enter));
    let mut cell = [0i64; 3];
    let mut next = [f64::INFINITY; 3];
    let mut delta = [f64::INFINITY; 3];
    let mut dir = [0i64; 3];
    for a in 0..3 {
        let p = o[a] + mid * d[a];
        cell[a] = (((p - lo[a]) / size[a]).floor() as i64).clamp(0, n as i64 - 1);
        if d[a] != 0.0 {
            dir[a] = if d[a] > 0.0 { 1 } else { -1 };
            let edge = if d[a] > 0.0 { cell[a] + 1 } else { cell[a] };
            let plane = lo[a] + (hi[a] - lo[a]) * edge as f64 / n as f64;
            next[a] = (plane - o[a]) / d[a];
            delta[a] = size[a] / d[a].abs();
        }
    }

    let mut out = Vec::new();
    let mut t = t_enter;
    loop {
        let a = (0..3).min_by(|&x, &y| next[x].total_cmp(&next[y])).unwrap();
        let leave = next[a].min(t_exit);
        let c = [cell[0] as usize, cell[1] as usize, cell[2] as usize];
        out.push(Crossing { voxel: flat(c, n), t_in: t, t_out: leave });
        if next[a] >= t_exit {
            break;
        }
        t = leave;
        cell[a] += dir[a];
        if cell[a] < 0 || cell[a] >= n as i64 {
            break;
        }
        next[a] += delta[a];
    }
    out
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over every checked
    /// coordinate of the module, analytic `a` against numeric `n`.
    pub max_rel_error: f64,
    /// Parameter with the largest share of `‖a − n‖²`.
    pub worst: String,
    pub checked: usize,
    /// Coordinates skipped because the loss has a kink within `±h`.
    pub skipped_kinks: usize,
}

/// Compares analytic gradients with central finite differences of step `h`.
///
/// Up to `coords_per_param` randomly chosen coordinates are perturbed per
/// parameter. Each coordinate is probed at `±h` and `±h/2`; coordinates
/// where the probes reveal a kink inside the stencil (a ReLU, max or clamp
/// switching) are skipped and counted, since no finite-difference value is
/// meaningful there.
pub fn grad_check<M: Module>(
    module: &mut M,
    h: f32,
    coords_per_param: usize,
    rng: &mut impl Rng,
    mut loss_fn: impl FnMut(&M, &mut Graph) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let loss = loss_fn(module, &mut g)?;
    g.backward(loss)?;
    let base = g.scalar(loss) as f64;
    let analytic: Vec<Vec<f32>> = module
        .params()
        .iter()
        .map(|p| match g.param_var(p.name()).and_then(|v| g.grad(v)) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; p.value().len()],
        })
        .collect();
    drop(g);

    let mut eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(m, &mut g)?;
        Ok(g.scalar(l) as f64)
    };

    let mut report = GradCheckReport::default();
    let n_params = analytic.len();
    let (mut total_diff2, mut worst_share, mut a2, mut n2) = (0.0f64, -1.0f64, 0.0f64, 0.0f64);
    for pi in 0..n_params {
        let len = analytic[pi].len();
        let coords: Vec<usize> = if len <= coords_per_param {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, coords_per_param).into_vec()
        };
        let mut diff2 = 0.0f64;
        let name = module.params()[pi].name().to_string();
        for c in coords {
            let orig = module.params()[pi].value().data()[c];
            // Loss at `orig + d` together with the step actually realized in f32.
            let mut probe = |m: &mut M, d: f32| -> Result<(f64, f64)> {
                let v = orig + d;
                m.params_mut()[pi].value_mut().data_mut()[c] = v;
                let l = eval(m);
                m.params_mut()[pi].value_mut().data_mut()[c] = orig;
                Ok((l?, v as f64 - orig as f64))
            };
            let (plus, sp) = probe(module, h)?;
            let (minus, sm) = probe(module, -h)?;
            let (plus2, sp2) = probe(module, 0.5 * h)?;
            let (minus2, sm2) = probe(module, -0.5 * h)?;
            let right = (plus - base) / sp;
            let left = (base - minus) / -sm;
            let right2 = (plus2 - base) / sp2;
            let left2 = (base - minus2) / -sm2;
            let central = (plus - minus) / (sp - sm);
            let central2 = (plus2 - minus2) / (sp2 - sm2);
            let scale = right.abs().max(left.abs());
            let noise = 2.0 * f32::EPSILON as f64 * base.abs().max(1e-3) / (0.5 * h as f64);
            // For a smooth loss the one-sided gap shrinks linearly with the
            // step and the central difference moves by O(h²) when the step is
            // halved. A ReLU, max or clamp switching inside the stencil
            // breaks at least one of the two.
            let gap = ((right - left) - 2.0 * (right2 - left2)).abs() > 1e-3 * scale + 4.0 * noise;
            let halving = (central - central2).abs() > 1e-4 * scale + noise;
            if gap || halving {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = central;
            let a = analytic[pi][c] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            report.checked += 1;
        }
        if diff2 >= worst_share {
            worst_share = diff2;
            report.worst = name;
        }
        total_diff2 += diff2;
    }
    let denom = a2.sqrt().max(n2.sqrt());
    report.max_rel_error = if denom < 1e-12 { total_diff2.sqrt() } else { total_diff2.sqrt() / denom };
    Ok(report)
}

/// RMSE, REL, MAE and the three δ percentages straight from their
/// definitions.
pub fn metrics_by_formula(pred: &[f64], gt: &[f64]) -> [f64; 6] {
    let n = pred.len() as f64;
    let mut sq = 0.0;
    let mut rel = 0.0;
    let mut abs = 0.0;
    let mut hits = [0usize; 3];
    for i in 0..pred.len() {
        let (d, t) = (pred[i], gt[i]);
        sq += (d - t) * (d - t);
        rel += (d - t).abs() / t;
        abs += (d - t).abs();
        let ratio = if d > 0.0 { f64::max(d / t, t / d) } else { f64::INFINITY };
        for (k, thr) in [1.05, 1.10, 1.25].iter().enumerate() {
            if ratio < *thr {
                hits[k] += 1;
            }
        }
    }
    [
        (sq / n).sqrt(),
        rel / n,
        abs / n,
        100.0 * hits[0] as f64 / n,
        100.0 * hits[1] as f64 / n,
        100.0 * hits[2] as f64 / n,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_and_dda_oracles_agree_with_each_other() {
        let ws = Workspace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let ray = random_ray(&mut rng, &ws);
            let keep = |c: &&Crossing| c.t_out - c.t_in > 1e-4;
            let a: Vec<_> = dense_sampling_crossings(&ray, &ws, 4);
            let b: Vec<_> = dda_crossings(&ray, &ws, 4);
            let a: Vec<_> = a.iter().filter(keep).collect();
            let b: Vec<_> = b.iter().filter(keep).collect();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.voxel, y.voxel);
                assert!((x.t_in - y.t_in).abs() < 1e-6 && (x.t_out - y.t_out).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn brute_force_counts_center_point() {
        let ws = Workspace::new(Vec3::splat(0.0), Vec3::splat(1.0)).unwrap();
        let c = brute_force_counts(&[(0, Vec3::splat(0.5))], &ws, 2);
        assert_eq!(c[1][1][1], 1);
    }
}
