//! On-disk formats: netpbm images, little-endian PFM depth maps, ASCII point
//! clouds, per-sample metadata and the dataset directory layout.

mod dataset;
mod formats;

pub use dataset::{read_meta, write_meta, Dataset, SampleFile, SampleMeta};
pub use formats::{
    decode_pfm, decode_pgm, decode_ppm, encode_pfm, encode_pgm, encode_ppm, read_pfm, read_pgm, read_ppm, write_pfm,
    write_pgm, write_ppm, write_xyz,
};
