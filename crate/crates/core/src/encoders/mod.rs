//! The three embeddings fed to the implicit depth function: pooled RGB
//! features, frequency-encoded geometry and per-voxel point features.

pub mod pointnet;
pub mod posenc;
pub mod rgb;
pub mod roi;

pub use pointnet::{PointSet, VoxelPointNet, POINT_FEATURES};
pub use posenc::{positional_encode, PosEnc};
pub use rgb::{FeatureMap, RgbEncoder, RGB_CHANNELS};
pub use roi::{roi_pool, roi_support, RGB_EMBED_DIM};
