//! Sliding-window patchification of extended latents, the zero-padded
//! inverse maps, overlap-averaged merging, and dilated pillar sampling.
//!
//! A window of side `K` moves in x and y with stride `K / d`; the z axis is
//! never split. Window `(i, j)` covers
//! `[i*K/d, i*K/d + K) x [j*K/d, j*K/d + K) x [0, K)` with
//! `i in 0..=(a-1)*d` and `j in 0..=(b-1)*d`, so the last window abuts the
//! far boundary of the `aK x bK x K` lattice.

mod dilated;

pub use dilated::{dilated_partition, gather_dilated, scatter_dilated, DilatedPartition};

use crate::error::{Error, Result};
use crate::lattice::{DenseLatent, SparseLatent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub i: usize,
    pub j: usize,
    /// Window side.
    pub k: usize,
    /// Division factor.
    pub d: usize,
}

impl Window {
    pub fn stride(&self) -> usize {
        self.k / self.d
    }

    pub fn x0(&self) -> usize {
        self.i * self.stride()
    }

    pub fn y0(&self) -> usize {
        self.j * self.stride()
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let (x0, y0) = (self.x0(), self.y0());
        x >= x0 && x < x0 + self.k && y >= y0 && y < y0 + self.k && z < self.k
    }

    pub fn contains_coord(&self, p: [u32; 3]) -> bool {
        self.contains(p[0] as usize, p[1] as usize, p[2] as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    a: usize,
    b: usize,
    d: usize,
    k: usize,
    windows: Vec<Window>,
}

/// All windows of side `k` that fit in the `a*k x b*k x k` lattice.
pub fn make_patch_grid(a: usize, b: usize, d: usize, k: usize) -> Result<PatchGrid> {
    if a == 0 || b == 0 || k == 0 {
        return Err(Error::Config(format!(
            "extension factors and window side must be positive (a={a}, b={b}, K={k})"
        )));
    }
    if d == 0 || !k.is_multiple_of(d) {
        return Err(Error::Config(format!(
            "division factor d={d} must divide the window side K={k}"
        )));
    }
    let mut windows = Vec::with_capacity(((a - 1) * d + 1) * ((b - 1) * d + 1));
    for i in 0..=(a - 1) * d {
        for j in 0..=(b - 1) * d {
            windows.push(Window { i, j, k, d });
        }
    }
    Ok(PatchGrid { a, b, d, k, windows })
}

impl PatchGrid {
    pub fn a(&self) -> usize {
        self.a
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Extent `(a*K, b*K, K)` of the lattice the grid tiles.
    pub fn extent(&self) -> [usize; 3] {
        [self.a * self.k, self.b * self.k, self.k]
    }

    fn axis_coverage(&self, pos: usize, factor: usize) -> usize {
        let s = self.k / self.d;
        let last = (factor - 1) * self.d;
        // windows with i*s <= pos < i*s + k
        let hi = (pos / s).min(last);
        let lo = if pos + 1 > self.k {
            (pos + 1 - self.k).div_ceil(s)
        } else {
            0
        };
        if lo > hi {
            0
        } else {
            hi - lo + 1
        }
    }

    /// Number of windows covering the column `(x, y)`.
    pub fn coverage(&self, x: usize, y: usize) -> usize {
        self.axis_coverage(x, self.a) * self.axis_coverage(y, self.b)
    }

    /// Windows containing the cell, in grid order.
    pub fn windows_containing(&self, x: usize, y: usize, z: usize) -> Vec<usize> {
        self.windows
            .iter()
            .enumerate()
            .filter(|(_, w)| w.contains(x, y, z))
            .map(|(n, _)| n)
            .collect()
    }

    fn check_dense(&self, z: &DenseLatent) -> Result<()> {
        let [x, y, zz, _] = z.shape();
        if [x, y, zz] != self.extent() {
            return Err(Error::Dimension(format!(
                "latent shape {:?} does not match grid extent {:?}",
                z.shape(),
                self.extent()
            )));
        }
        Ok(())
    }
}

/// Sub-tensor copy over the window box.
pub fn patch_dense(z: &DenseLatent, w: &Window) -> Result<DenseLatent> {
    let [sx, sy, sz, c] = z.shape();
    let k = w.k;
    if w.x0() + k > sx || w.y0() + k > sy || k > sz {
        return Err(Error::Dimension(format!(
            "window ({}, {}) with side {k} exceeds lattice {:?}",
            w.i,
            w.j,
            z.shape()
        )));
    }
    let mut out = DenseLatent::zeros([k, k, k, c]);
    for u in 0..k {
        for v in 0..k {
            let src = &z.column(w.x0() + u, w.y0() + v)[..k * c];
            out.column_mut(u, v).copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Zero lattice of the given shape except the window box, which receives `x`.
pub fn unpatch_dense(x: &DenseLatent, w: &Window, shape: [usize; 4]) -> Result<DenseLatent> {
    let k = w.k;
    if x.shape() != [k, k, k, shape[3]] {
        return Err(Error::Dimension(format!(
            "patch shape {:?} does not match window side {k}",
            x.shape()
        )));
    }
    if w.x0() + k > shape[0] || w.y0() + k > shape[1] || k > shape[2] {
        return Err(Error::Dimension("window exceeds target lattice".into()));
    }
    let mut out = DenseLatent::zeros(shape);
    let c = shape[3];
    for u in 0..k {
        for v in 0..k {
            out.column_mut(w.x0() + u, w.y0() + v)[..k * c].copy_from_slice(x.column(u, v));
        }
    }
    Ok(out)
}

/// Entries inside the window, translated into `[K]^3`.
pub fn patch_sparse(z: &SparseLatent, w: &Window) -> SparseLatent {
    let (x0, y0) = (w.x0() as u32, w.y0() as u32);
    let width = z.width();
    let mut coords = Vec::new();
    let mut features = Vec::new();
    // coordinates are sorted by x first, so the window's rows are one run
    let all = z.coords();
    let lo = all.partition_point(|p| p[0] < x0);
    let hi = all.partition_point(|p| p[0] < x0 + w.k as u32);
    for (n, &p) in all.iter().enumerate().take(hi).skip(lo) {
        let f = z.feature(n);
        if w.contains_coord(p) {
            coords.push([p[0] - x0, p[1] - y0, p[2]]);
            features.extend_from_slice(f);
        }
    }
    let k = w.k as u32;
    SparseLatent::from_parts_unchecked([k, k, k], width, coords, features)
}

/// Translates `x` back into the extended lattice and zero-fills every global
/// coordinate it does not carry.
pub fn unpatch_sparse(
    x: &SparseLatent,
    w: &Window,
    global_coords: &[[u32; 3]],
    extent: [u32; 3],
) -> Result<SparseLatent> {
    let (x0, y0) = (w.x0() as u32, w.y0() as u32);
    let width = x.width();
    let mut sorted = global_coords.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut features = vec![0.0f32; sorted.len() * width];
    for (p, f) in x.iter() {
        let g = [p[0] + x0, p[1] + y0, p[2]];
        let idx = sorted.binary_search(&g).map_err(|_| {
            Error::Dimension(format!("patch coordinate {g:?} not in the global coordinate set"))
        })?;
        features[idx * width..(idx + 1) * width].copy_from_slice(f);
    }
    SparseLatent::from_parts(extent, width, sorted, features)
}

/// Per-cell mean over all covering windows of the patch vectors, one per
/// window in grid order. Sums run in 64-bit in grid order.
pub fn merge_dense(patches: &[DenseLatent], grid: &PatchGrid) -> Result<DenseLatent> {
    if patches.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} patch vectors for {} windows",
            patches.len(),
            grid.len()
        )));
    }
    let k = grid.k();
    let c = patches.first().map(|p| p.shape()[3]).unwrap_or(1);
    let [ex, ey, ez] = grid.extent();
    let shape = [ex, ey, ez, c];
    let col = ez * c;
    let mut acc = vec![0.0f64; ex * ey * col];
    for (w, p) in grid.windows().iter().zip(patches) {
        if p.shape() != [k, k, k, c] {
            return Err(Error::Dimension(format!(
                "patch ({}, {}) has shape {:?}, expected {:?}",
                w.i,
                w.j,
                p.shape(),
                [k, k, k, c]
            )));
        }
        for u in 0..k {
            for v in 0..k {
                let start = ((w.x0() + u) * ey + (w.y0() + v)) * col;
                for (a, &s) in acc[start..start + col].iter_mut().zip(p.column(u, v)) {
                    *a += s as f64;
                }
            }
        }
    }
    let mut out = DenseLatent::zeros(shape);
    for x in 0..ex {
        for y in 0..ey {
            let count = grid.coverage(x, y);
            if count == 0 {
                return Err(Error::Dimension(format!("column ({x}, {y}) is not covered")));
            }
            let start = (x * ey + y) * col;
            for (o, &a) in out.column_mut(x, y).iter_mut().zip(&acc[start..start + col]) {
                *o = (a / count as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Sparse analogue of [`merge_dense`]: each global coordinate receives the
/// sum of its translated patch features divided by the number of windows
/// covering it.
pub fn merge_sparse(
    patches: &[SparseLatent],
    grid: &PatchGrid,
    global: &SparseLatent,
) -> Result<SparseLatent> {
    if patches.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} patch vectors for {} windows",
            patches.len(),
            grid.len()
        )));
    }
    let width = global.width();
    let mut acc = vec![0.0f64; global.len() * width];
    for (w, p) in grid.windows().iter().zip(patches) {
        if p.width() != width {
            return Err(Error::Dimension("patch feature width differs from global".into()));
        }
        let (x0, y0) = (w.x0() as u32, w.y0() as u32);
        let mut hint = 0;
        for (q, f) in p.iter() {
            let g = [q[0] + x0, q[1] + y0, q[2]];
            let idx = global.find_from(hint, g).ok_or_else(|| {
                Error::Dimension(format!("patch coordinate {g:?} not in the global coordinate set"))
            })?;
            hint = idx;
            for (a, &s) in acc[idx * width..(idx + 1) * width].iter_mut().zip(f) {
                *a += s as f64;
            }
        }
    }
    let mut features = Vec::with_capacity(acc.len());
    for (n, p) in global.coords().iter().enumerate() {
        let count = grid.coverage(p[0] as usize, p[1] as usize);
        if count == 0 || (p[2] as usize) >= grid.k() {
            return Err(Error::Dimension(format!("coordinate {p:?} is not covered")));
        }
        features.extend(acc[n * width..(n + 1) * width].iter().map(|&a| (a / count as f64) as f32));
    }
    global.with_features(features)
}

/// Patch restrictions of a dense field, in grid order.
pub fn patch_all_dense(z: &DenseLatent, grid: &PatchGrid) -> Result<Vec<DenseLatent>> {
    grid.check_dense(z)?;
    grid.windows().iter().map(|w| patch_dense(z, w)).collect()
}
