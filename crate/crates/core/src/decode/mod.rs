//! Toy structured-latent decoding to signed distances, cosine-weighted
//! blending of overlapping SDF patches, and point-cloud export.

use crate::error::{Error, Result};
use crate::lattice::{OccupancyGrid, RawTensor, SparseLatent};
use crate::patchwork::PatchGrid;
use crate::ply::PointCloud;

/// Dense signed distances, negative inside, row-major `(x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl SdfGrid {
    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        SdfGrid {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "SDF shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("SDF contains non-finite values".into()));
        }
        Ok(SdfGrid { shape, data })
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        SdfGrid { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }
}

impl From<&SdfGrid> for RawTensor {
    fn from(g: &SdfGrid) -> Self {
        RawTensor {
            shape: g.shape.iter().map(|&s| s as u32).collect(),
            data: g.data.clone(),
        }
    }
}

impl TryFrom<RawTensor> for SdfGrid {
    type Error = Error;

    fn try_from(t: RawTensor) -> Result<Self> {
        if t.shape.len() != 3 {
            return Err(Error::Dimension(format!("SDF tensor must be rank 3, got {:?}", t.shape)));
        }
        SdfGrid::from_vec([t.shape[0] as usize, t.shape[1] as usize, t.shape[2] as usize], t.data)
    }
}

/// Channel 0 of every entry becomes the signed distance of its cell; all
/// other cells are outside at `+1`.
pub fn toy_decode_sdf(patch: &SparseLatent) -> SdfGrid {
    let e = patch.extent();
    let mut g = SdfGrid::filled([e[0] as usize, e[1] as usize, e[2] as usize], 1.0);
    if patch.width() == 0 {
        return g;
    }
    for (c, f) in patch.iter() {
        g.set(c[0] as usize, c[1] as usize, c[2] as usize, f[0]);
    }
    g
}

/// Separable raised-cosine window weight along x and y. Each side ramps
/// from 0 at the window edge to 1 over `ramp` cells; `ramp` is the overlap
/// depth `K - K/d` capped at `K/2` so both ramps fit in the window. With no
/// overlap the weight is 1 everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineWeightField {
    k: usize,
    ramp: f64,
}

impl CosineWeightField {
    pub fn new(k: usize, d: usize) -> Result<Self> {
        if k == 0 || d == 0 || !k.is_multiple_of(d) {
            return Err(Error::Config(format!("weight field needs d | K, got K = {k}, d = {d}")));
        }
        let overlap = (k - k / d) as f64;
        Ok(CosineWeightField {
            k,
            ramp: overlap.min(k as f64 / 2.0),
        })
    }

    pub fn ramp(&self) -> f64 {
        self.ramp
    }

    fn rise(s: f64) -> f64 {
        0.5 - 0.5 * (std::f64::consts::PI * s.min(1.0)).cos()
    }

    /// One-axis weight at window offset `u`.
    pub fn axis(&self, u: usize) -> f64 {
        if self.ramp == 0.0 {
            return 1.0;
        }
        let lo = (u as f64 + 0.5) / self.ramp;
        let hi = ((self.k - 1 - u) as f64 + 0.5) / self.ramp;
        Self::rise(lo).min(Self::rise(hi))
    }

    pub fn weight(&self, u: usize, v: usize) -> f64 {
        self.axis(u) * self.axis(v)
    }
}

/// Cosine-weighted mean of per-window SDF patches (one per window, grid
/// order), accumulated in 64-bit in grid order.
pub fn merge_sdf_patches(patches: &[SdfGrid], grid: &PatchGrid) -> Result<SdfGrid> {
    if patches.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} SDF patches for {} windows",
            patches.len(),
            grid.len()
        )));
    }
    let k = grid.k();
    let weights = CosineWeightField::new(k, grid.d())?;
    let shape = grid.extent();
    let cells: usize = shape.iter().product();
    let mut num = vec![0.0f64; cells];
    let mut den = vec![0.0f64; cells];
    for (w, p) in grid.windows().iter().zip(patches) {
        if p.shape() != [k, k, k] {
            return Err(Error::Dimension(format!(
                "SDF patch ({}, {}) has shape {:?}, expected {:?}",
                w.i,
                w.j,
                p.shape(),
                [k, k, k]
            )));
        }
        for u in 0..k {
            for v in 0..k {
                let wt = weights.weight(u, v);
                let base = ((w.x0() + u) * shape[1] + (w.y0() + v)) * shape[2];
                for z in 0..k {
                    num[base + z] += wt * p.get(u, v, z) as f64;
                    den[base + z] += wt;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(cells);
    for (i, (&n, &d)) in num.iter().zip(&den).enumerate() {
        if !(d > 0.0) {
            return Err(Error::Dimension(format!("SDF cell {i} has zero total weight")));
        }
        data.push((n / d) as f32);
    }
    SdfGrid::from_vec(shape, data)
}

fn voxel_center(p: [u32; 3], m: usize) -> [f32; 3] {
    let m = m as f64;
    [
        ((p[0] as f64 + 0.5) / m) as f32,
        ((p[1] as f64 + 0.5) / m) as f32,
        ((p[2] as f64 + 0.5) / m) as f32,
    ]
}

/// One vertex per occupied voxel centre in scene units `(p + 0.5) / M`.
pub fn export_occupancy(grid: &OccupancyGrid, m: usize) -> PointCloud {
    PointCloud {
        points: grid.occupied_coords().into_iter().map(|p| voxel_center(p, m)).collect(),
        colors: None,
    }
}

/// Vertices for every structured-latent entry, optionally colored from
/// feature channels 0..3 clamped to [0, 1].
pub fn export_slat(slat: &SparseLatent, m: usize, colors: bool) -> PointCloud {
    let points = slat.coords().iter().map(|&p| voxel_center(p, m)).collect();
    let colors = colors.then(|| {
        slat.iter()
            .map(|(_, f)| {
                let mut rgb = [0u8; 3];
                for (ch, out) in rgb.iter_mut().enumerate() {
                    let v = f.get(ch).copied().unwrap_or(0.0).clamp(0.0, 1.0);
                    *out = (v * 255.0).round() as u8;
                }
                rgb
            })
            .collect()
    });
    PointCloud { points, colors }
}

/// Voxel coordinates recovered from exported vertex centres.
pub fn import_voxels(cloud: &PointCloud, m: usize) -> Vec<[u32; 3]> {
    let mut out: Vec<[u32; 3]> = cloud
        .points
        .iter()
        .map(|p| p.map(|c| (c as f64 * m as f64).floor().max(0.0) as u32))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}
