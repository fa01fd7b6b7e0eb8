use std::path::{Path, PathBuf};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::synth::Sample;

use super::formats::{read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm};

/// The five files stored per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFile {
    Rgb,
    GtDepth,
    InputDepth,
    Mask,
    Meta,
}

impl SampleFile {
    pub const ALL: [SampleFile; 5] = [Self::Rgb, Self::GtDepth, Self::InputDepth, Self::Mask, Self::Meta];

    pub fn suffix(self) -> &'static str {
        match self {
            Self::Rgb => "rgb.ppm",
            Self::GtDepth => "gtdepth.pfm",
            Self::InputDepth => "indepth.pfm",
            Self::Mask => "mask.pgm",
            Self::Meta => "meta.txt",
        }
    }
}

/// Camera and seed of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMeta {
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

pub fn write_meta(path: &Path, meta: &SampleMeta) -> Result<()> {
    let k = &meta.intrinsics;
    let text = format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\nseed = {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height, meta.seed
    );
    Ok(std::fs::write(path, text)?)
}

pub fn read_meta(path: &Path) -> Result<SampleMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| format_err(path, 0, e.to_string()))?;
    let mut vals: [Option<&str>; 7] = [None; 7];
    const KEYS: [&str; 7] = ["fx", "fy", "cx", "cy", "width", "height", "seed"];
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let content = line.split('#').next().unwrap().trim();
        if !content.is_empty() {
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| format_err(path, offset, format!("expected `key = value`, found `{content}`")))?;
            let slot = KEYS
                .iter()
                .position(|&x| x == k.trim())
                .ok_or_else(|| format_err(path, offset, format!("unknown key `{}`", k.trim())))?;
            vals[slot] = Some(v.trim());
        }
        offset += line.len();
    }
    let get = |i: usize| vals[i].ok_or_else(|| format_err(path, offset, format!("missing key `{}`", KEYS[i])));
    let float = |i: usize| -> Result<f32> {
        get(i)?.parse().map_err(|_| format_err(path, 0, format!("bad value for `{}`", KEYS[i])))
    };
    let int = |i: usize| -> Result<u64> {
        get(i)?.parse().map_err(|_| format_err(path, 0, format!("bad value for `{}`", KEYS[i])))
    };
    let intrinsics =
        CameraIntrinsics::new(float(0)?, float(1)?, float(2)?, float(3)?, int(4)? as usize, int(5)? as usize)
            .map_err(|e| format_err(path, 0, e.to_string()))?;
    Ok(SampleMeta {
        intrinsics,
        seed: int(6)?,
    })
}

fn format_err(path: &Path, offset: usize, msg: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    }
}

/// A dataset directory holding samples `00000` … `len − 1`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub len: usize,
}

impl Dataset {
    pub fn file(dir: &Path, index: usize, kind: SampleFile) -> PathBuf {
        dir.join(format!("{index:05}_{}", kind.suffix()))
    }

    /// Opens `dir`, checking that indices are contiguous from 0 and that
    /// every sample has all five files.
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| format_err(dir, 0, e.to_string()))?;
        let mut indices = std::collections::BTreeSet::new();
        for entry in entries {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some((idx, rest)) = name.split_once('_') {
                if idx.len() == 5 && SampleFile::ALL.iter().any(|f| f.suffix() == rest) {
                    if let Ok(i) = idx.parse::<usize>() {
                        indices.insert(i);
                    }
                }
            }
        }
        let len = indices.len();
        if let Some(missing) = (0..len).find(|i| !indices.contains(i)) {
            return Err(format_err(dir, 0, format!("sample indices are not contiguous: {missing:05} is missing")));
        }
        for i in 0..len {
            for kind in SampleFile::ALL {
                let p = Self::file(dir, i, kind);
                if !p.is_file() {
                    return Err(format_err(&p, 0, "missing sample file".into()));
                }
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            len,
        })
    }

    pub fn path(&self, index: usize, kind: SampleFile) -> PathBuf {
        Self::file(&self.dir, index, kind)
    }

    pub fn read(&self, index: usize) -> Result<Sample> {
        let meta = read_meta(&self.path(index, SampleFile::Meta))?;
        let rgb = read_ppm(&self.path(index, SampleFile::Rgb))?;
        let gt_depth = read_pfm(&self.path(index, SampleFile::GtDepth))?;
        let input_depth = read_pfm(&self.path(index, SampleFile::InputDepth))?;
        let mask = read_pgm(&self.path(index, SampleFile::Mask))?;
        let (w, h) = (meta.intrinsics.width, meta.intrinsics.height);
        for (kind, size) in [
            (SampleFile::Rgb, (rgb.width, rgb.height)),
            (SampleFile::GtDepth, (gt_depth.width, gt_depth.height)),
            (SampleFile::InputDepth, (input_depth.width, input_depth.height)),
            (SampleFile::Mask, (mask.width, mask.height)),
        ] {
            if size != (w, h) {
                return Err(format_err(
                    &self.path(index, kind),
                    0,
                    format!("size {}x{} differs from meta {w}x{h}", size.0, size.1),
                ));
            }
        }
        Ok(Sample {
            rgb,
            gt_depth,
            input_depth,
            mask,
            intrinsics: meta.intrinsics,
            seed: meta.seed,
        })
    }

    pub fn write(dir: &Path, index: usize, sample: &Sample) -> Result<()> {
        write_ppm(&Self::file(dir, index, SampleFile::Rgb), &sample.rgb)?;
        write_pfm(&Self::file(dir, index, SampleFile::GtDepth), &sample.gt_depth)?;
        write_pfm(&Self::file(dir, index, SampleFile::InputDepth), &sample.input_depth)?;
        write_pgm(&Self::file(dir, index, SampleFile::Mask), &sample.mask)?;
        write_meta(
            &Self::file(dir, index, SampleFile::Meta),
            &SampleMeta {
                intrinsics: sample.intrinsics,
                seed: sample.seed,
            },
        )
    }
}
