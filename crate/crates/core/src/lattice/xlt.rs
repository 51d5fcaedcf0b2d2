//! "XLT1" raw tensor files: an 8-byte magic, little-endian `u32` rank and
//! dimensions, then the row-major `f32` payload.

use std::path::Path;

use super::{DenseLatent, OccupancyGrid};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"XLT1\0\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(shape: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(RawTensor { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::parse(0, "missing XLT1 magic"));
        }
        let mut offset = MAGIC.len();
        let rank = read_u32(bytes, &mut offset)? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(read_u32(bytes, &mut offset)?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::parse(offset, "element count overflows"))?;
        let needed = count
            .checked_mul(4)
            .ok_or_else(|| Error::parse(offset, "payload size overflows"))?;
        let remaining = bytes.len() - offset;
        if remaining < needed {
            return Err(Error::parse(
                bytes.len(),
                format!("payload truncated: need {needed} bytes, have {remaining}"),
            ));
        }
        if remaining > needed {
            return Err(Error::parse(offset + needed, "trailing bytes after payload"));
        }
        let data = bytes[offset..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(RawTensor { shape, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn read_u32(bytes: &[u8], offset: &mut usize) -> Result<u32> {
    let end = *offset + 4;
    let chunk = bytes
        .get(*offset..end)
        .ok_or_else(|| Error::parse(*offset, "header truncated"))?;
    *offset = end;
    Ok(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
}

impl From<&DenseLatent> for RawTensor {
    fn from(z: &DenseLatent) -> Self {
        RawTensor {
            shape: z.shape().iter().map(|&d| d as u32).collect(),
            data: z.data().to_vec(),
        }
    }
}

impl TryFrom<RawTensor> for DenseLatent {
    type Error = Error;

    fn try_from(t: RawTensor) -> Result<Self> {
        let shape: [usize; 4] = match t.shape.as_slice() {
            [x, y, z, c] => [*x as usize, *y as usize, *z as usize, *c as usize],
            [x, y, z] => [*x as usize, *y as usize, *z as usize, 1],
            other => {
                return Err(Error::Dimension(format!(
                    "expected a rank-3 or rank-4 tensor, got shape {other:?}"
                )))
            }
        };
        DenseLatent::from_vec(shape, t.data)
    }
}

impl From<&OccupancyGrid> for RawTensor {
    fn from(o: &OccupancyGrid) -> Self {
        RawTensor {
            shape: o.shape().iter().map(|&d| d as u32).collect(),
            data: o.cells().iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
        }
    }
}

impl TryFrom<RawTensor> for OccupancyGrid {
    type Error = Error;

    /// Cells with value `> 0.5` are occupied.
    fn try_from(t: RawTensor) -> Result<Self> {
        let shape: [usize; 3] = match t.shape.as_slice() {
            [x, y, z] | [x, y, z, 1] => [*x as usize, *y as usize, *z as usize],
            other => {
                return Err(Error::Dimension(format!(
                    "expected a rank-3 occupancy tensor, got shape {other:?}"
                )))
            }
        };
        let mut i = 0;
        Ok(OccupancyGrid::from_fn(shape, |_, _, _| {
            let v = t.data[i] > 0.5;
            i += 1;
            v
        }))
    }
}
