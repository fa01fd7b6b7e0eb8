use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::image::{DepthImage, Mask, RgbImage};

/// Cursor over a netpbm-style header: whitespace-separated tokens with `#`
/// comments, followed by exactly one whitespace byte before the payload.
struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Header<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        loop {
            match self.buf.get(self.pos) {
                Some(b'#') => {
                    while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(self.err(format!("header ends before {what}"))),
            }
        }
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| self.err(format!("{what} is not text")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.token(what)?;
        let start = self.pos - tok.len();
        tok.parse().map_err(|_| {
            let mut e = self.err(format!("bad {what} `{tok}`"));
            if let Error::Format { offset, .. } = &mut e {
                *offset = start as u64;
            }
            e
        })
    }

    /// Consumes the single separator byte and returns the payload.
    fn payload(&mut self, expected: usize) -> Result<&'a [u8]> {
        if !self.buf.get(self.pos).is_some_and(|c| c.is_ascii_whitespace()) {
            return Err(self.err("missing whitespace before payload"));
        }
        self.pos += 1;
        let have = self.buf.len() - self.pos;
        if have < expected {
            self.pos = self.buf.len();
            return Err(self.err(format!("truncated payload: {have} of {expected} bytes")));
        }
        if have > expected {
            self.pos += expected;
            return Err(self.err(format!("{} trailing bytes after payload", have - expected)));
        }
        Ok(&self.buf[self.pos..])
    }

    fn magic(&mut self, want: &str) -> Result<()> {
        let tok = self.token("magic")?;
        if tok != want {
            self.pos = 0;
            return Err(self.err(format!("expected magic {want}, found `{tok}`")));
        }
        Ok(())
    }

    fn size(&mut self) -> Result<(usize, usize)> {
        let w: usize = self.number("width")?;
        let h: usize = self.number("height")?;
        if w == 0 || h == 0 {
            return Err(self.err(format!("empty image {w}x{h}")));
        }
        Ok((w, h))
    }

    fn maxval(&mut self) -> Result<()> {
        let m: u32 = self.number("maxval")?;
        if m != 255 {
            return Err(self.err(format!("maxval {m} unsupported (only 255)")));
        }
        Ok(())
    }
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&x| to_u8(x)));
    out
}

pub fn decode_ppm(buf: &[u8], path: &Path) -> Result<RgbImage> {
    let mut h = Header::new(buf, path);
    h.magic("P6")?;
    let (w, ht) = h.size()?;
    h.maxval()?;
    let data = h.payload(3 * w * ht)?.iter().map(|&b| b as f32 / 255.0).collect();
    RgbImage::new(w, ht, data)
}

/// Masks are stored as 0/255; any non-zero byte reads as set.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn decode_pgm(buf: &[u8], path: &Path) -> Result<Mask> {
    let mut h = Header::new(buf, path);
    h.magic("P5")?;
    let (w, ht) = h.size()?;
    h.maxval()?;
    let data = h.payload(w * ht)?.iter().map(|&b| b != 0).collect();
    Mask::new(w, ht, data)
}

/// Grayscale little-endian PFM; rows are stored bottom to top.
pub fn encode_pfm(depth: &DepthImage) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for row in depth.data.chunks_exact(depth.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(buf: &[u8], path: &Path) -> Result<DepthImage> {
    let mut h = Header::new(buf, path);
    let tok = h.token("magic")?;
    if tok != "Pf" {
        h.pos = 0;
        let hint = if tok == "PF" { " (color PFM is not a depth map)" } else { "" };
        return Err(h.err(format!("expected magic Pf, found `{tok}`{hint}")));
    }
    let (w, ht) = h.size()?;
    let scale_at = h.pos;
    let scale: f32 = h.number("scale")?;
    if !(scale < 0.0) {
        h.pos = scale_at;
        return Err(h.err(format!(
            "scale {scale} declares big-endian data; only little-endian PFM (negative scale) is supported"
        )));
    }
    let payload = h.payload(4 * w * ht)?;
    let mut data = vec![0.0f32; w * ht];
    for (r, row) in payload.chunks_exact(4 * w).enumerate() {
        let dst = &mut data[(ht - 1 - r) * w..(ht - r) * w];
        for (d, c) in dst.iter_mut().zip(row.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    DepthImage::new(w, ht, data)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: e.to_string(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?, path)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(img))?)
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&read(path)?, path)
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(mask))?)
}

pub fn read_pfm(path: &Path) -> Result<DepthImage> {
    decode_pfm(&read(path)?, path)
}

pub fn write_pfm(path: &Path, depth: &DepthImage) -> Result<()> {
    Ok(std::fs::write(path, encode_pfm(depth))?)
}

/// One `x y z r g b` line per point, colors as 0–255 integers.
pub fn write_xyz(path: &Path, points: &[(Vec3, [f32; 3])]) -> Result<()> {
    let mut s = String::with_capacity(points.len() * 40);
    for (p, c) in points {
        let _ = writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, to_u8(c[0]), to_u8(c[1]), to_u8(c[2]));
    }
    Ok(std::fs::write(path, s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn offset_of(e: Error) -> (u64, String) {
        match e {
            Error::Format { offset, msg, .. } => (offset, msg),
            other => panic!("unexpected {other}"),
        }
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_bitwise(w in 1usize..9, h in 1usize..7, seed in any::<u32>()) {
            let data: Vec<f32> = (0..w * h)
                .map(|i| f32::from_bits((seed as u64 * 2654435761 + i as u64 * 97) as u32 & 0x7f7f_ffff))
                .collect();
            let d = DepthImage::new(w, h, data).unwrap();
            let back = decode_pfm(&encode_pfm(&d), Path::new("x.pfm")).unwrap();
            prop_assert!(back.data.iter().zip(&d.data).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!((back.width, back.height), (w, h));
        }
    }

    #[test]
    fn pfm_rows_are_bottom_to_top() {
        let d = DepthImage::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&d);
        let payload = &bytes[bytes.len() - 16..];
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 3.0);
    }

    #[test]
    fn positive_scale_is_rejected() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_be_bytes());
        let (offset, msg) = offset_of(decode_pfm(&bytes, Path::new("be.pfm")).unwrap_err());
        assert_eq!(offset, 6);
        assert!(msg.contains("big-endian"), "{msg}");
    }

    #[test]
    fn truncation_reports_offset() {
        let d = DepthImage::new(3, 2, vec![0.5; 6]).unwrap();
        let bytes = encode_pfm(&d);
        let cut = &bytes[..bytes.len() - 5];
        let (offset, msg) = offset_of(decode_pfm(cut, Path::new("t.pfm")).unwrap_err());
        assert_eq!(offset as usize, cut.len());
        assert!(msg.contains("truncated"));
        let (offset, _) = offset_of(decode_ppm(b"P6\n4 x\n255\n", Path::new("a.ppm")).unwrap_err());
        assert_eq!(offset, 5);
        assert!(decode_ppm(b"P3\n1 1\n255\n\0\0\0", Path::new("a.ppm")).is_err());
    }

    #[test]
    fn ppm_and_pgm_round_trip() {
        let img = RgbImage::new(2, 1, vec![0.0, 1.0, 0.5, 20.0 / 255.0, 0.25, 1.0]).unwrap();
        let back = decode_ppm(&encode_ppm(&img), Path::new("a.ppm")).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(encode_ppm(&back), encode_ppm(&img));
        let m = Mask::new(3, 2, vec![true, false, false, true, true, false]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&m), Path::new("m.pgm")).unwrap(), m);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_ppm(b"P6 # made by hand\n1 1\n# max\n255\n\x00\xff\x00", Path::new("c.ppm")).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0, 0.0]);
    }
}
