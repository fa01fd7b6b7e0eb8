//! Two-stage voxel PointNet.
//!
//! Stage one embeds every point (position relative to its voxel center,
//! scaled by the cell size, plus color), max-pools per voxel and applies a
//! voxel MLP. Stage two concatenates each point's embedding with its
//! voxel's stage-one embedding and repeats point MLP, max-pool and voxel MLP.

use rand::Rng;

use crate::error::{contract, Result};
use crate::geom::Vec3;
use crate::nn::{first_layer, Activation, Block, Graph, Mlp, Module, Parameter, Var};
use crate::voxel::VoxelGrid;

/// Per-point input width: relative position and RGB.
pub const POINT_FEATURES: usize = 6;

/// Points grouped by occupied voxel, ready for the encoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    /// Row-major `[points, 6]`.
    pub features: Vec<f32>,
    /// Voxel slot of each row.
    pub segment: Vec<usize>,
    pub num_voxels: usize,
}

impl PointSet {
    /// Gathers the resident points of every occupied voxel in slot order.
    /// Grid point ids index into `positions` and `colors`.
    pub fn from_grid(grid: &VoxelGrid, positions: &[Vec3], colors: &[[f32; 3]]) -> Self {
        let cell = grid.cell_size();
        let mut set = PointSet {
            num_voxels: grid.num_occupied(),
            ..Default::default()
        };
        for (slot, &v) in grid.occupied().iter().enumerate() {
            let center = grid.voxel_center(v);
            for &id in grid.points_in(v) {
                let r = positions[id] - center;
                set.features
                    .extend_from_slice(&[r.x / cell.x, r.y / cell.y, r.z / cell.z]);
                set.features.extend_from_slice(&colors[id]);
                set.segment.push(slot);
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct VoxelPointNet {
    pub point1: Mlp,
    pub voxel1: Mlp,
    pub point2: Mlp,
    pub voxel2: Mlp,
}

impl VoxelPointNet {
    pub fn new(name: &str, c_v: usize, rng: &mut impl Rng) -> Self {
        Self {
            point1: Mlp::new(&format!("{name}.point1"), &[POINT_FEATURES, 32, 64], Activation::Relu, rng),
            voxel1: Mlp::new(&format!("{name}.voxel1"), &[64, 64], Activation::Relu, rng),
            point2: Mlp::new(&format!("{name}.point2"), &[128, 32, 64], Activation::Relu, rng),
            voxel2: Mlp::new(&format!("{name}.voxel2"), &[64, c_v], Activation::None, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.voxel2.output_dim()
    }

    /// `[num_voxels, C_v]` embeddings in slot order.
    pub fn forward(&self, g: &mut Graph, set: &PointSet) -> Result<Var> {
        let mut counts = vec![0usize; set.num_voxels];
        for &s in &set.segment {
            if s >= set.num_voxels {
                return Err(contract(format!("point segment {s} out of {} voxels", set.num_voxels)));
            }
            counts[s] += 1;
        }
        if let Some(s) = counts.iter().position(|&c| c == 0) {
            return Err(contract(format!("occupied voxel slot {s} has no points")));
        }
        if set.features.len() != set.len() * POINT_FEATURES {
            return Err(contract("point features do not match the segment list"));
        }
        let x = g.constant_matrix(set.len(), POINT_FEATURES, set.features.clone());
        self.forward_var(g, x, &set.segment, set.num_voxels)
    }

    /// Forward on point features already on the graph (e.g. differentiable
    /// positions).
    pub fn forward_var(&self, g: &mut Graph, x: Var, segment: &[usize], num_voxels: usize) -> Result<Var> {
        let pcl = self.point1.forward(g, x)?;
        let pooled = g.segment_max(pcl, segment, num_voxels);
        let vox = self.voxel1.forward(g, pooled)?;
        // point2 sees [point feature, voxel feature]; the voxel half is
        // multiplied per voxel and then spread to the points.
        let d = g.dims(pcl).1;
        let blocks = vec![
            Block { input: pcl, rows: 0..d, index: None },
            Block { input: vox, rows: d..d + g.dims(vox).1, index: Some(segment.to_vec()) },
        ];
        let pre = first_layer(g, &self.point2.layers[0], blocks, segment.len())?;
        let mut pcl2 = g.relu(pre);
        let n = self.point2.layers.len();
        for (k, layer) in self.point2.layers.iter().enumerate().skip(1) {
            let act = if k + 1 == n { self.point2.last } else { Activation::Relu };
            pcl2 = layer.forward(g, pcl2, act)?;
        }
        let pooled2 = g.segment_max(pcl2, segment, num_voxels);
        self.voxel2.forward(g, pooled2)
    }
}

impl Module for VoxelPointNet {
    fn params(&self) -> Vec<&Parameter> {
        [&self.point1, &self.voxel1, &self.point2, &self.voxel2]
            .into_iter()
            .flat_map(|m| m.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.point1.params_mut();
        out.extend(self.voxel1.params_mut());
        out.extend(self.point2.params_mut());
        out.extend(self.voxel2.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn embed(net: &VoxelPointNet, set: &PointSet) -> Vec<f32> {
        let mut g = Graph::inference();
        let v = net.forward(&mut g, set).unwrap();
        g.data(v).to_vec()
    }

    fn random_set(rng: &mut ChaCha8Rng, voxels: usize, per: usize) -> PointSet {
        let mut set = PointSet {
            num_voxels: voxels,
            ..Default::default()
        };
        for s in 0..voxels {
            for _ in 0..per {
                for _ in 0..POINT_FEATURES {
                    set.features.push(rng.random_range(-0.5..0.5));
                }
                set.segment.push(s);
            }
        }
        set
    }

    #[test]
    fn permutation_and_duplication_are_exact_no_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = VoxelPointNet::new("pn", 64, &mut rng);
        let set = random_set(&mut rng, 3, 5);
        let base = embed(&net, &set);

        let mut order: Vec<usize> = (0..set.len()).collect();
        order.reverse();
        order.swap(0, 7);
        let permuted = PointSet {
            features: order
                .iter()
                .flat_map(|&i| set.features[i * 6..i * 6 + 6].to_vec())
                .collect(),
            segment: order.iter().map(|&i| set.segment[i]).collect(),
            num_voxels: 3,
        };
        assert_eq!(embed(&net, &permuted), base);

        let mut dup = set.clone();
        dup.features.extend_from_slice(&set.features[6..12]);
        dup.segment.push(set.segment[1]);
        assert_eq!(embed(&net, &dup), base);
    }

    #[test]
    fn singleton_voxel_pools_to_its_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = VoxelPointNet::new("pn", 64, &mut rng);
        let set = random_set(&mut rng, 2, 1);
        let mut g = Graph::inference();
        let x = g.constant_matrix(2, 6, set.features.clone());
        let pcl = net.point1.forward(&mut g, x).unwrap();
        let pooled = g.segment_max(pcl, &set.segment, 2);
        assert_eq!(g.data(pooled), g.data(pcl));
    }

    #[test]
    fn empty_voxel_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = VoxelPointNet::new("pn", 64, &mut rng);
        let mut set = random_set(&mut rng, 2, 2);
        set.num_voxels = 3;
        assert!(net.forward(&mut Graph::inference(), &set).is_err());
    }

    #[test]
    fn from_grid_uses_relative_scaled_positions() {
        use crate::voxel::Workspace;
        let ws = Workspace::new(Vec3::splat(0.0), Vec3::splat(1.0)).unwrap();
        let pos = vec![Vec3::new(0.3, 0.3, 0.3), Vec3::new(0.75, 0.75, 0.75)];
        let grid = VoxelGrid::from_points(pos.iter().copied().enumerate(), ws, 2).unwrap();
        let set = PointSet::from_grid(&grid, &pos, &[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
        assert_eq!(set.num_voxels, 2);
        assert_eq!(set.segment, vec![0, 1]);
        let f = &set.features;
        assert!((f[0] - (0.3 - 0.25) / 0.5).abs() < 1e-6);
        assert!((f[6] - 0.0).abs() < 1e-6);
        assert_eq!(&f[9..12], &[0.4, 0.5, 0.6]);
    }
}
