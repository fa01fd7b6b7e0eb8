//! Named-tensor checkpoint format.
//!
//! Layout (all integers little-endian): magic `LIDF`, `u32` version (1),
//! `u32` metadata length and UTF-8 metadata text, `u32` tensor count, then per tensor `u16` name length, UTF-8 name,
//! `u8` rank, `rank × u32` dims and the raw `f32` data.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LIDF";
pub const VERSION: u32 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    encode_with_meta("", tensors)
}

/// Encodes tensors together with free-form metadata text.
pub fn encode_with_meta<'a>(meta: &str, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(decode_with_meta(buf, path)?.1)
}

pub fn decode_with_meta(buf: &[u8], path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected LIDF"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| r.err("metadata is not UTF-8"))?
        .to_string();
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last tensor"));
    }
    Ok((meta, out))
}

pub fn save<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(load_with_meta(path)?.1)
}

pub fn load_with_meta(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let buf = std::fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: e.to_string(),
    })?;
    decode_with_meta(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let a = Tensor::new(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 1e-30, 7.25]).unwrap();
        let b = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let bytes = encode([("a.weight", &a), ("b", &b)]);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.weight");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[1].1.shape(), &[4]);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1], vec![2.0]).unwrap();
        let bytes = encode([("x", &t)]);
        assert_eq!(&bytes[..4], b"LIDF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..18], &1u16.to_le_bytes());
        assert_eq!(bytes[18], b'x');
        assert_eq!(bytes[19], 1);
        assert_eq!(&bytes[20..24], &1u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &2.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn metadata_round_trip() {
        let t = Tensor::new(vec![1], vec![2.0]).unwrap();
        let bytes = encode_with_meta("grid.n = 4\n", [("x", &t)]);
        let (meta, tensors) = decode_with_meta(&bytes, Path::new("m")).unwrap();
        assert_eq!(meta, "grid.n = 4\n");
        assert_eq!(tensors.len(), 1);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode([("x", &t)]);
        let err = decode(&bytes[..bytes.len() - 2], Path::new("ck.bin")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ck.bin") && msg.contains("offset 24"), "{msg}");
    }
}
