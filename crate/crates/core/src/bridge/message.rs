//! Evaluation request and response payloads.
//!
//! Request: `f32 t`, `u8 mode`, four `u32` shape, `u32` condition length,
//! condition bytes, latent. Response: `u8 mode`, four `u32` shape, latent.
//! Dense latents are row-major `f32`; sparse latents are a `u32` count then
//! `count x (3 x u32 coord + l x f32 feature)` with shape `(X, Y, Z, l)`.

use crate::error::{Error, Result};
use crate::flowcore::PatchLatent;
use crate::lattice::{DenseLatent, SparseLatent};

pub const MODE_DENSE: u8 = 1;
pub const MODE_SPARSE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub t: f32,
    pub latent: PatchLatent,
    pub condition: Vec<u8>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_latent(out: &mut Vec<u8>, latent: &PatchLatent) {
    match latent {
        PatchLatent::Dense(d) => {
            out.push(MODE_DENSE);
            for s in d.shape() {
                put_u32(out, s as u32);
            }
        }
        PatchLatent::Sparse(s) => {
            out.push(MODE_SPARSE);
            for e in s.extent() {
                put_u32(out, e);
            }
            put_u32(out, s.width() as u32);
        }
    }
}

fn put_body(out: &mut Vec<u8>, latent: &PatchLatent) {
    match latent {
        PatchLatent::Dense(d) => {
            out.reserve(d.len() * 4);
            for v in d.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        PatchLatent::Sparse(s) => {
            put_u32(out, s.len() as u32);
            for (c, f) in s.iter() {
                for v in c {
                    put_u32(out, v);
                }
                for v in f {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

pub fn encode_request(req: &EvalRequest) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&req.t.to_le_bytes());
    put_latent(&mut out, &req.latent);
    put_u32(&mut out, req.condition.len() as u32);
    out.extend_from_slice(&req.condition);
    put_body(&mut out, &req.latent);
    out
}

pub fn encode_response(vector: &PatchLatent) -> Vec<u8> {
    let mut out = Vec::new();
    put_latent(&mut out, vector);
    put_body(&mut out, vector);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.at.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            _ => Err(Error::Protocol(format!(
                "payload too short for {what}: need {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len()
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Protocol(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn read_body(cur: &mut Cursor<'_>, mode: u8, shape: [u32; 4]) -> Result<PatchLatent> {
    match mode {
        MODE_DENSE => {
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &s| acc.checked_mul(s as usize))
                .filter(|&n| n <= cur.bytes.len() / 4)
                .ok_or_else(|| Error::Protocol(format!("dense shape {shape:?} exceeds the payload")))?;
            let raw = cur.take(len * 4, "dense latent")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let s = shape.map(|v| v as usize);
            let d = DenseLatent::from_vec(s, data).map_err(|e| Error::Protocol(e.to_string()))?;
            Ok(PatchLatent::Dense(d))
        }
        MODE_SPARSE => {
            let count = cur.u32("sparse count")? as usize;
            let width = shape[3] as usize;
            let entry = width
                .checked_mul(4)
                .and_then(|w| w.checked_add(12))
                .ok_or_else(|| Error::Protocol("sparse width overflows".into()))?;
            if count.checked_mul(entry).is_none_or(|n| n > cur.bytes.len() - cur.at) {
                return Err(Error::Protocol(format!("{count} sparse entries exceed the payload")));
            }
            let mut coords = Vec::with_capacity(count);
            let mut features = Vec::with_capacity(count * width);
            for _ in 0..count {
                coords.push([cur.u32("coord")?, cur.u32("coord")?, cur.u32("coord")?]);
                for _ in 0..width {
                    features.push(cur.f32("feature")?);
                }
            }
            let extent = [shape[0], shape[1], shape[2]];
            let s = SparseLatent::from_parts(extent, width, coords, features)
                .map_err(|e| Error::Protocol(e.to_string()))?;
            Ok(PatchLatent::Sparse(s))
        }
        other => Err(Error::Protocol(format!("unknown latent mode {other}"))),
    }
}

fn read_shape(cur: &mut Cursor<'_>) -> Result<[u32; 4]> {
    Ok([cur.u32("shape")?, cur.u32("shape")?, cur.u32("shape")?, cur.u32("shape")?])
}

pub fn decode_request(payload: &[u8]) -> Result<EvalRequest> {
    let mut cur = Cursor { bytes: payload, at: 0 };
    let t = cur.f32("t")?;
    let mode = cur.u8("mode")?;
    let shape = read_shape(&mut cur)?;
    let cond_len = cur.u32("condition length")? as usize;
    let condition = cur.take(cond_len, "condition")?.to_vec();
    let latent = read_body(&mut cur, mode, shape)?;
    cur.finish()?;
    Ok(EvalRequest { t, latent, condition })
}

pub fn decode_response(payload: &[u8]) -> Result<PatchLatent> {
    let mut cur = Cursor { bytes: payload, at: 0 };
    let mode = cur.u8("mode")?;
    let shape = read_shape(&mut cur)?;
    let latent = read_body(&mut cur, mode, shape)?;
    cur.finish()?;
    Ok(latent)
}
