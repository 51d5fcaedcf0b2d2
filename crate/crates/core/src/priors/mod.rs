//! Scene priors: the conditioning image with its per-pixel point map,
//! voxelization of the points, and geometry-accurate image patchification.

mod spr;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::OccupancyGrid;
use crate::patchwork::PatchGrid;

/// `H x W x 3` RGB image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn black(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrior {
    pub image: Image,
    /// One world-space point per pixel, row-major.
    pub points: Vec<[f32; 3]>,
    pub valid: Vec<bool>,
    /// Row-major 3x4 projection matrix. Carried but not used by the
    /// orthographic toy renderer.
    pub camera: [f32; 12],
}

impl ScenePrior {
    pub fn new(image: Image, points: Vec<[f32; 3]>, valid: Vec<bool>, camera: [f32; 12]) -> Result<Self> {
        let pixels = image.height() * image.width();
        if points.len() != pixels || valid.len() != pixels {
            return Err(Error::Dimension(format!(
                "image has {pixels} pixels but point map has {} and mask {}",
                points.len(),
                valid.len()
            )));
        }
        if points
            .iter()
            .zip(&valid)
            .any(|(p, &v)| v && p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::Dimension("non-finite point at a valid pixel".into()));
        }
        Ok(ScenePrior {
            image,
            points,
            valid,
            camera,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        spr::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        spr::decode(bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn valid_points(&self) -> Vec<[f32; 3]> {
        self.points
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(p, _)| *p)
            .collect()
    }
}

pub fn load_scene_prior(path: impl AsRef<Path>) -> Result<ScenePrior> {
    ScenePrior::from_bytes(&std::fs::read(path)?)
}

/// World-space box mapped onto the extended lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl NormalizationBox {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = NormalizationBox { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let extent = self.max[axis] - self.min[axis];
            if !(extent.is_finite() && extent > 0.0) {
                return Err(Error::Config(format!(
                    "normalization box has non-positive extent on axis {axis}"
                )));
            }
        }
        Ok(())
    }

    /// Tight bounding box of the points, grown by `margin` of its extent on
    /// each side of every axis. Degenerate axes get a unit extent.
    pub fn fit(points: &[[f32; 3]], margin: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("cannot fit a normalization box to zero points".into()));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for axis in 0..3 {
                min[axis] = min[axis].min(p[axis] as f64);
                max[axis] = max[axis].max(p[axis] as f64);
            }
        }
        for axis in 0..3 {
            let extent = max[axis] - min[axis];
            if extent <= 0.0 {
                min[axis] -= 0.5;
                max[axis] += 0.5;
            } else {
                min[axis] -= margin * extent;
                max[axis] += margin * extent;
            }
        }
        Self::new(min, max)
    }

    /// Voxel of `p` on a lattice of the given extent; the flag reports
    /// whether `p` was outside the closed box and had to be clamped.
    pub fn voxel(&self, p: [f32; 3], extent: [usize; 3]) -> ([u32; 3], bool) {
        let mut out = [0u32; 3];
        let mut outside = false;
        for axis in 0..3 {
            let v = p[axis] as f64;
            outside |= v < self.min[axis] || v > self.max[axis];
            let rel = (v - self.min[axis]) / (self.max[axis] - self.min[axis]);
            let cell = (rel * extent[axis] as f64).floor();
            let hi = extent[axis] as f64 - 1.0;
            out[axis] = cell.clamp(0.0, hi) as u32;
        }
        (out, outside)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Voxelization {
    pub grid: OccupancyGrid,
    /// Points that fell outside the box and were clamped to its faces.
    pub clamped: usize,
}

pub fn voxelize(points: &[[f32; 3]], bbox: &NormalizationBox, shape: [usize; 3]) -> Voxelization {
    let mut grid = OccupancyGrid::empty(shape);
    let mut clamped = 0;
    for &p in points {
        let (v, outside) = bbox.voxel(p, shape);
        clamped += outside as usize;
        grid.set(v[0] as usize, v[1] as usize, v[2] as usize, true);
    }
    Voxelization { grid, clamped }
}

/// Voxel of every point, duplicates kept.
pub fn voxel_multiset(points: &[[f32; 3]], bbox: &NormalizationBox, shape: [usize; 3]) -> Vec<[u32; 3]> {
    points.iter().map(|&p| bbox.voxel(p, shape).0).collect()
}

/// Indices of the windows of `grid` containing the voxel of `q`.
pub fn pixel_to_window(q: [f32; 3], bbox: &NormalizationBox, grid: &PatchGrid) -> Result<Vec<usize>> {
    if q.iter().any(|c| !c.is_finite()) {
        return Err(Error::Parameter(format!("non-finite point {q:?}")));
    }
    let (v, _) = bbox.voxel(q, grid.extent());
    let hits = grid.windows_containing(v[0] as usize, v[1] as usize, v[2] as usize);
    assert!(!hits.is_empty(), "voxel {v:?} is covered by no window");
    Ok(hits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub image: Image,
    /// No pixel mapped into the window; `image` is a 1x1 black placeholder.
    pub empty: bool,
}

/// Keeps the pixels whose points fall in window `window` of `grid`, blacks
/// out the rest, crops to the kept pixels' bounding box, and pads the crop to
/// a square with black rows or columns at the bottom or right.
pub fn image_patchify(
    prior: &ScenePrior,
    bbox: &NormalizationBox,
    grid: &PatchGrid,
    window: usize,
) -> ImagePatch {
    let w = grid.windows()[window];
    let extent = grid.extent();
    let (h, wd) = (prior.image.height(), prior.image.width());
    let mut keep = vec![false; h * wd];
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for row in 0..h {
        for col in 0..wd {
            let n = row * wd + col;
            if !prior.valid[n] {
                continue;
            }
            let (v, _) = bbox.voxel(prior.points[n], extent);
            if w.contains(v[0] as usize, v[1] as usize, v[2] as usize) {
                keep[n] = true;
                r0 = r0.min(row);
                r1 = r1.max(row);
                c0 = c0.min(col);
                c1 = c1.max(col);
            }
        }
    }
    if r0 == usize::MAX {
        return ImagePatch {
            image: Image::black(1, 1),
            empty: true,
        };
    }
    let (ch, cw) = (r1 - r0 + 1, c1 - c0 + 1);
    let side = ch.max(cw);
    let mut out = Image::black(side, side);
    for row in r0..=r1 {
        for col in c0..=c1 {
            if keep[row * wd + col] {
                out.set_pixel(row - r0, col - c0, prior.image.pixel(row, col));
            }
        }
    }
    ImagePatch {
        image: out,
        empty: false,
    }
}

/// Opaque conditioning bytes handed to a vector-field provider.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConditionEmbedding {
    bytes: Vec<u8>,
}

impl ConditionEmbedding {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        ConditionEmbedding { bytes }
    }

    pub fn from_f32s(values: &[f32]) -> Self {
        ConditionEmbedding {
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

pub const TOY_CONDITION_LEN: usize = 11 * 4;

/// Mean RGB followed by an 8-bin luminance histogram (fractions), as 11
/// little-endian `f32`.
pub fn toy_condition(image: &Image) -> ConditionEmbedding {
    let pixels = (image.height() * image.width()).max(1) as f64;
    let mut mean = [0.0f64; 3];
    let mut hist = [0.0f64; 8];
    for px in image.data().chunks_exact(3) {
        for c in 0..3 {
            mean[c] += px[c] as f64;
        }
        let lum = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
        let bin = ((lum * 8.0).floor().max(0.0) as usize).min(7);
        hist[bin] += 1.0;
    }
    let values: Vec<f32> = mean
        .iter()
        .chain(hist.iter())
        .map(|&v| (v / pixels) as f32)
        .collect();
    ConditionEmbedding::from_f32s(&values)
}

/// Top-down view of the prior on the `(x, y)` columns of the lattice: each
/// column takes the mean color of the valid pixels whose points land in it,
/// and stays black otherwise. Rows index x, columns index y.
pub fn top_view_target(prior: &ScenePrior, bbox: &NormalizationBox, extent: [usize; 3]) -> Image {
    let (ex, ey) = (extent[0], extent[1]);
    let mut sum = vec![0.0f64; ex * ey * 3];
    let mut count = vec![0usize; ex * ey];
    for (n, (&p, &v)) in prior.points.iter().zip(&prior.valid).enumerate() {
        if !v {
            continue;
        }
        let (vox, _) = bbox.voxel(p, extent);
        let col = vox[0] as usize * ey + vox[1] as usize;
        count[col] += 1;
        for c in 0..3 {
            sum[col * 3 + c] += prior.image.data()[n * 3 + c] as f64;
        }
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let k = count[i / 3];
            if k == 0 {
                0.0
            } else {
                (s / k as f64) as f32
            }
        })
        .collect();
    Image {
        height: ex,
        width: ey,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchwork::make_patch_grid;

    fn unit_box() -> NormalizationBox {
        NormalizationBox::new([0.0; 3], [1.0; 3]).unwrap()
    }

    fn tiny_prior() -> ScenePrior {
        let image = Image::from_vec(2, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let points = vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [f32::NAN, 0.0, 0.0], [0.9, 0.9, 0.9]];
        let valid = vec![true, true, false, true];
        let camera = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        ScenePrior::new(image, points, valid, camera).unwrap()
    }

    #[test]
    fn spr_round_trip_is_bit_exact() {
        let prior = tiny_prior();
        let bytes = prior.to_bytes();
        assert_eq!(&bytes[..4], b"SPR1");
        let back = ScenePrior::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn spr_truncation_reports_offset() {
        let bytes = tiny_prior().to_bytes();
        for cut in [0, 3, 7, 11, 20, bytes.len() - 1] {
            match ScenePrior::from_bytes(&bytes[..cut]) {
                Err(Error::Parse { .. }) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ScenePrior::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn all_invalid_mask_voxelizes_empty() {
        let mut prior = tiny_prior();
        prior.valid = vec![false; 4];
        let v = voxelize(&prior.valid_points(), &unit_box(), [4, 4, 4]);
        assert_eq!(v.grid.count(), 0);
    }

    #[test]
    fn voxelize_cases() {
        let b = NormalizationBox::new([-1.0, 0.0, 2.0], [1.0, 4.0, 3.0]).unwrap();
        let shape = [8, 8, 4];
        let v = voxelize(&[[-1.0, 0.0, 2.0]], &b, shape);
        assert_eq!(v.grid.occupied_coords(), vec![[0, 0, 0]]);
        assert_eq!(v.clamped, 0);
        let v = voxelize(&[[1.0, 4.0, 3.0]], &b, shape);
        assert_eq!(v.grid.occupied_coords(), vec![[7, 7, 3]]);
        let v = voxelize(&[[5.0, -4.0, 2.5]], &b, shape);
        assert_eq!(v.grid.occupied_coords(), vec![[7, 0, 2]]);
        assert_eq!(v.clamped, 1);
    }

    #[test]
    fn voxelize_distinct_cells() {
        let b = unit_box();
        let mut pts = Vec::new();
        for n in 0..8u32 {
            let x = (n & 1) as f32 * 0.5 + 0.1;
            let y = ((n >> 1) & 1) as f32 * 0.5 + 0.2;
            let z = ((n >> 2) & 1) as f32 * 0.5 + 0.3;
            pts.push([x, y, z]);
        }
        let g = voxelize(&pts, &b, [4, 4, 4]).grid;
        assert_eq!(g.count(), 8);
        // brute-force binning
        for p in &pts {
            let c = p.map(|v| (v * 4.0).floor() as usize);
            assert!(g.get(c[0], c[1], c[2]));
        }
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(voxelize(&rev, &b, [4, 4, 4]).grid, g);
    }

    #[test]
    fn pixel_window_membership() {
        let b = unit_box();
        // d = 1: windows do not overlap
        let g = make_patch_grid(2, 2, 1, 4).unwrap();
        assert_eq!(pixel_to_window([0.01, 0.01, 0.5], &b, &g).unwrap().len(), 1);
        // d = 2: x in [2, 4) is shared by windows i=0 and i=1
        let g = make_patch_grid(2, 1, 2, 4).unwrap();
        let hits = pixel_to_window([0.3, 0.5, 0.5], &b, &g).unwrap();
        assert_eq!(hits.len(), 2);
        let brute: Vec<usize> = (0..g.len())
            .filter(|&n| g.windows()[n].contains(2, 2, 2))
            .collect();
        assert_eq!(hits, brute);
        assert!(pixel_to_window([f32::NAN, 0.0, 0.0], &b, &g).is_err());
    }

    fn striped_prior() -> ScenePrior {
        // 4x4 image; column c maps to world x = (c + 0.5) / 4
        let mut image = Image::black(4, 4);
        let mut points = Vec::new();
        for row in 0..4 {
            for col in 0..4 {
                image.set_pixel(row, col, [0.2 + 0.1 * col as f32, 0.5, 0.1 * row as f32]);
                points.push([(col as f32 + 0.5) / 4.0, (row as f32 + 0.5) / 4.0, 0.5]);
            }
        }
        ScenePrior::new(image, points, vec![true; 16], [0.0; 12]).unwrap()
    }

    #[test]
    fn patchify_single_window_keeps_everything() {
        let prior = striped_prior();
        let g = make_patch_grid(1, 1, 1, 4).unwrap();
        let p = image_patchify(&prior, &unit_box(), &g, 0);
        assert!(!p.empty);
        assert_eq!(p.image, prior.image);
    }

    #[test]
    fn patchify_left_half() {
        let prior = striped_prior();
        // a = 2 along x with d = 1: window 0 covers world x in [0, 0.5)
        let g = make_patch_grid(2, 1, 1, 4).unwrap();
        let bbox = unit_box();
        let p = image_patchify(&prior, &bbox, &g, 0);
        assert_eq!((p.image.height(), p.image.width()), (4, 4));
        for row in 0..4 {
            for col in 0..4 {
                let expect = if col < 2 { prior.image.pixel(row, col) } else { [0.0; 3] };
                assert_eq!(p.image.pixel(row, col), expect, "({row}, {col})");
            }
        }
        // kept pixels all map into the window
        for (n, q) in prior.points.iter().enumerate() {
            let (row, col) = (n / 4, n % 4);
            if p.image.pixel(row, col) != [0.0; 3] {
                assert!(pixel_to_window(*q, &bbox, &g).unwrap().contains(&0));
            }
        }
    }

    #[test]
    fn patchify_all_invalid_is_flagged() {
        let mut prior = striped_prior();
        prior.valid = vec![false; 16];
        let g = make_patch_grid(1, 1, 1, 4).unwrap();
        let p = image_patchify(&prior, &unit_box(), &g, 0);
        assert!(p.empty);
        assert_eq!((p.image.height(), p.image.width()), (1, 1));
    }

    #[test]
    fn toy_condition_cases() {
        let black = toy_condition(&Image::black(3, 3));
        assert_eq!(black.len(), TOY_CONDITION_LEN);
        let vals: Vec<f32> = black
            .as_bytes()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        assert_eq!(&vals[..3], &[0.0; 3]);
        assert_eq!(vals[3], 1.0);
        assert!(vals[4..].iter().all(|&v| v == 0.0));

        let white = Image::from_vec(2, 2, vec![1.0; 12]).unwrap();
        let c = toy_condition(&white);
        let vals: Vec<f32> = c
            .as_bytes()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        assert_eq!(&vals[..3], &[1.0; 3]);
        assert_eq!(vals[10], 1.0);
        assert_eq!(toy_condition(&white), c);
    }
}
