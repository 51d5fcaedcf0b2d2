//! Value types for extended latents and their elementary algebra.
//!
//! Dense latents are row-major `(x, y, z, c)` arrays of `f32`. Sparse latents
//! keep their coordinates sorted lexicographically so that lookups are a
//! binary search and window translation preserves order.

mod xlt;

pub use xlt::RawTensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extension factors and base lattice sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Extension factor along x.
    pub a: usize,
    /// Extension factor along y.
    pub b: usize,
    /// Side of the base sparse-structure lattice.
    pub n: usize,
    /// Side of the base occupancy / structured-latent lattice.
    pub m: usize,
    /// Sparse-structure channel count.
    pub c: usize,
    /// Structured-latent feature width.
    pub l: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            a: 2,
            b: 2,
            n: 8,
            m: 32,
            c: 1,
            l: 4,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.a, self.b, self.n, self.m, self.c, self.l];
        if fields.contains(&0) {
            return Err(Error::Config(format!("all dims must be >= 1, got {self:?}")));
        }
        if !self.m.is_multiple_of(self.n) {
            return Err(Error::Config(format!(
                "M = {} is not a multiple of N = {}",
                self.m, self.n
            )));
        }
        Ok(())
    }

    /// Occupancy-to-latent resolution ratio `M / N`.
    pub fn ratio(&self) -> usize {
        self.m / self.n
    }

    /// Shape of the extended sparse-structure latent.
    pub fn ss_shape(&self) -> [usize; 4] {
        [self.a * self.n, self.b * self.n, self.n, self.c]
    }

    /// Extent of the extended occupancy / structured-latent lattice.
    pub fn occupancy_shape(&self) -> [usize; 3] {
        [self.a * self.m, self.b * self.m, self.m]
    }

    pub fn slat_extent(&self) -> [u32; 3] {
        let [x, y, z] = self.occupancy_shape();
        [x as u32, y as u32, z as u32]
    }
}

/// Dense real lattice of shape `(x, y, z, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLatent {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl DenseLatent {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        DenseLatent {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("dense latent contains non-finite values".into()));
        }
        Ok(DenseLatent { shape, data })
    }

    /// Builds a lattice by evaluating `f(x, y, z, c)` at every cell.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    for c in 0..shape[3] {
                        data.push(f(x, y, z, c));
                    }
                }
            }
        }
        DenseLatent { shape, data }
    }

    /// I.i.d. standard normal entries, deterministic per seed.
    pub fn gaussian(shape: [usize; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        DenseLatent { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        let [_, sy, sz, sc] = self.shape;
        ((x * sy + y) * sz + z) * sc + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.index(x, y, z, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, value: f32) {
        let i = self.index(x, y, z, c);
        self.data[i] = value;
    }

    /// Contiguous `z * c` slice of one `(x, y)` column.
    pub fn column(&self, x: usize, y: usize) -> &[f32] {
        let len = self.shape[2] * self.shape[3];
        let start = self.index(x, y, 0, 0);
        &self.data[start..start + len]
    }

    pub fn column_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let len = self.shape[2] * self.shape[3];
        let start = self.index(x, y, 0, 0);
        &mut self.data[start..start + len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self + alpha * other`, evaluated in 64-bit and rounded once.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&s, &o)| (s as f64 + alpha * o as f64) as f32)
            .collect();
        Ok(DenseLatent {
            shape: self.shape,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }
}

/// `(1 - t) * x0 + t * eps`, element-wise.
pub fn lerp_latent(x0: &DenseLatent, eps: &DenseLatent, t: f64) -> Result<DenseLatent> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!("interpolation time {t} outside [0, 1]")));
    }
    x0.check_same_shape(eps)?;
    let data = x0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&a, &e)| ((1.0 - t) * a as f64 + t * e as f64) as f32)
        .collect();
    Ok(DenseLatent {
        shape: x0.shape,
        data,
    })
}

/// Standard-normal extended sparse-structure latent.
pub fn sample_gaussian(dims: &Dims, seed: u64) -> DenseLatent {
    DenseLatent::gaussian(dims.ss_shape(), seed)
}

/// Set of `(coordinate, feature)` pairs over a bounded integer lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLatent {
    extent: [u32; 3],
    width: usize,
    coords: Vec<[u32; 3]>,
    features: Vec<f32>,
}

impl SparseLatent {
    pub fn empty(extent: [u32; 3], width: usize) -> Self {
        SparseLatent {
            extent,
            width,
            coords: Vec::new(),
            features: Vec::new(),
        }
    }

    /// Builds from unordered entries; duplicate coordinates are rejected.
    pub fn from_entries(
        extent: [u32; 3],
        width: usize,
        mut entries: Vec<([u32; 3], Vec<f32>)>,
    ) -> Result<Self> {
        entries.sort_by_key(|a| a.0);
        let mut coords = Vec::with_capacity(entries.len());
        let mut features = Vec::with_capacity(entries.len() * width);
        for (coord, feature) in entries {
            if feature.len() != width {
                return Err(Error::Dimension(format!(
                    "feature of length {} where width is {width}",
                    feature.len()
                )));
            }
            coords.push(coord);
            features.extend_from_slice(&feature);
        }
        Self::from_parts(extent, width, coords, features)
    }

    /// Builds from coordinates already in strictly increasing order.
    pub fn from_parts(
        extent: [u32; 3],
        width: usize,
        coords: Vec<[u32; 3]>,
        features: Vec<f32>,
    ) -> Result<Self> {
        if features.len() != coords.len() * width {
            return Err(Error::Dimension(format!(
                "{} coordinates with width {width} need {} feature values, got {}",
                coords.len(),
                coords.len() * width,
                features.len()
            )));
        }
        for pair in coords.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Dimension(format!(
                    "coordinates not strictly increasing at {:?}",
                    pair[1]
                )));
            }
        }
        for &coord in &coords {
            check_bounds(coord, extent)?;
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("sparse latent contains non-finite features".into()));
        }
        Ok(SparseLatent {
            extent,
            width,
            coords,
            features,
        })
    }

    pub(crate) fn from_parts_unchecked(
        extent: [u32; 3],
        width: usize,
        coords: Vec<[u32; 3]>,
        features: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(features.len(), coords.len() * width);
        SparseLatent {
            extent,
            width,
            coords,
            features,
        }
    }

    pub fn extent(&self) -> [u32; 3] {
        self.extent
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f32] {
        &mut self.features
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn find(&self, coord: [u32; 3]) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }

    /// Like [`find`](Self::find) but gallops forward from `hint`, which makes
    /// runs of ascending lookups close to linear. Falls back to a full search
    /// when `coord` lies before `hint`.
    pub fn find_from(&self, hint: usize, coord: [u32; 3]) -> Option<usize> {
        let n = self.coords.len();
        if hint >= n || self.coords[hint] > coord {
            return self.find(coord);
        }
        let mut lo = hint;
        let mut step = 1;
        while lo + step < n && self.coords[lo + step] <= coord {
            lo += step;
            step *= 2;
        }
        let hi = (lo + step).min(n);
        self.coords[lo..hi].binary_search(&coord).ok().map(|i| lo + i)
    }

    pub fn iter(&self) -> impl Iterator<Item = ([u32; 3], &[f32])> + '_ {
        self.coords
            .iter()
            .zip(self.features.chunks(self.width.max(1)))
            .map(|(&c, f)| (c, f))
    }

    /// Same coordinates, new feature values.
    pub fn with_features(&self, features: Vec<f32>) -> Result<Self> {
        if features.len() != self.features.len() {
            return Err(Error::Dimension(format!(
                "expected {} feature values, got {}",
                self.features.len(),
                features.len()
            )));
        }
        Ok(SparseLatent {
            extent: self.extent,
            width: self.width,
            coords: self.coords.clone(),
            features,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.features.iter().all(|v| v.is_finite())
    }

    fn check_same_support(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.coords != other.coords {
            return Err(Error::Dimension(
                "sparse latents have different coordinate sets or widths".into(),
            ));
        }
        Ok(())
    }

    /// `self + alpha * other` over a shared coordinate set.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        self.check_same_support(other)?;
        let features = self
            .features
            .iter()
            .zip(&other.features)
            .map(|(&s, &o)| (s as f64 + alpha * o as f64) as f32)
            .collect();
        Ok(SparseLatent {
            extent: self.extent,
            width: self.width,
            coords: self.coords.clone(),
            features,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_support(other)?;
        Ok(self
            .features
            .iter()
            .zip(&other.features)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }
}

pub(crate) fn check_bounds(coord: [u32; 3], extent: [u32; 3]) -> Result<()> {
    if coord.iter().zip(&extent).any(|(c, e)| c >= e) {
        return Err(Error::Bounds { coord, extent });
    }
    Ok(())
}

/// One standard-normal feature per coordinate; the draw order follows the
/// sorted coordinate order so the result does not depend on input order.
pub fn init_sparse_noise(
    coords: &[[u32; 3]],
    extent: [u32; 3],
    width: usize,
    seed: u64,
) -> Result<SparseLatent> {
    for &c in coords {
        check_bounds(c, extent)?;
    }
    let mut sorted = coords.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..sorted.len() * width)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    Ok(SparseLatent::from_parts_unchecked(extent, width, sorted, features))
}

/// Boolean occupancy over an `(x, y, z)` lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    shape: [usize; 3],
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(shape: [usize; 3]) -> Self {
        OccupancyGrid {
            shape,
            cells: vec![false; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    cells.push(f(x, y, z));
                }
            }
        }
        OccupancyGrid { shape, cells }
    }

    pub fn from_coords(shape: [usize; 3], coords: &[[u32; 3]]) -> Result<Self> {
        let extent = [shape[0] as u32, shape[1] as u32, shape[2] as u32];
        let mut grid = Self::empty(shape);
        for &c in coords {
            check_bounds(c, extent)?;
            grid.set(c[0] as usize, c[1] as usize, c[2] as usize, true);
        }
        Ok(grid)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.cells[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.cells[i] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Occupied coordinates in lexicographic order.
    pub fn occupied_coords(&self) -> Vec<[u32; 3]> {
        let mut out = Vec::new();
        for x in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                for z in 0..self.shape[2] {
                    if self.get(x, y, z) {
                        out.push([x as u32, y as u32, z as u32]);
                    }
                }
            }
        }
        out
    }

    /// Intersection over union; two empty grids score 1.
    pub fn iou(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "IoU of differently shaped grids");
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &q) in self.cells.iter().zip(&other.cells) {
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Strictly decreasing integration times ending at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    times: Vec<f64>,
}

impl Schedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Schedule(format!("need at least 2 times, got {}", times.len())));
        }
        if times[0] > 1.0 || times[0] <= 0.0 {
            return Err(Error::Schedule(format!("first time {} outside (0, 1]", times[0])));
        }
        if *times.last().unwrap() != 0.0 {
            return Err(Error::Schedule("schedule must end at t = 0".into()));
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::Schedule("times must be strictly decreasing".into()));
        }
        Ok(Schedule { times })
    }

    /// `k` uniformly spaced times from `t_start` down to zero.
    pub fn uniform(t_start: f64, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Schedule(format!("need at least 2 times, got {k}")));
        }
        let last = (k - 1) as f64;
        let times = (0..k)
            .map(|m| {
                if m == 0 {
                    t_start
                } else if m == k - 1 {
                    0.0
                } else {
                    t_start * (last - m as f64) / last
                }
            })
            .collect();
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    /// Number of Euler steps (`k - 1`).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}
