//! "SPR1" scene-prior files: magic `SPR1`, little-endian `u32` height and
//! width, `f32` image (H*W*3), `f32` point map (H*W*3), `u8` validity mask
//! (H*W) and a `f32` 3x4 camera matrix.

use super::{Image, ScenePrior};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPR1";

pub fn encode(prior: &ScenePrior) -> Vec<u8> {
    let (h, w) = (prior.image.height(), prior.image.width());
    let mut out = Vec::with_capacity(12 + h * w * 25 + 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in prior.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &prior.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend(prior.valid.iter().map(|&v| v as u8));
    for v in &prior.camera {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::parse(
                    self.bytes.len(),
                    format!("truncated {what}: need {n} bytes at offset {}", self.offset),
                )
            })?;
        let s = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::parse(self.offset, format!("{what} size overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ScenePrior> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "missing SPR1 magic"));
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let pixels = h
        .checked_mul(w)
        .ok_or_else(|| Error::parse(4, "image size overflows"))?;
    let image_at = r.offset;
    let image = r.f32s(pixels * 3, "image")?;
    let points_at = r.offset;
    let flat = r.f32s(pixels * 3, "point map")?;
    let mask_at = r.offset;
    let mask = r.take(pixels, "validity mask")?;
    let mut valid = Vec::with_capacity(pixels);
    for (n, &m) in mask.iter().enumerate() {
        match m {
            0 => valid.push(false),
            1 => valid.push(true),
            other => {
                return Err(Error::parse(mask_at + n, format!("mask byte {other} is not 0 or 1")))
            }
        }
    }
    let camera_vals = r.f32s(12, "camera")?;
    if r.offset != bytes.len() {
        return Err(Error::parse(r.offset, "trailing bytes after camera"));
    }
    let mut camera = [0.0f32; 12];
    camera.copy_from_slice(&camera_vals);
    if let Some(n) = image.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(Error::parse(image_at + 4 * n, "image value outside [0, 1]"));
    }
    let points: Vec<[f32; 3]> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    for (n, (p, &v)) in points.iter().zip(&valid).enumerate() {
        if v && p.iter().any(|c| !c.is_finite()) {
            return Err(Error::parse(points_at + 12 * n, "non-finite point at a valid pixel"));
        }
    }
    let image = Image::from_vec(h, w, image)?;
    ScenePrior::new(image, points, valid, camera)
}
