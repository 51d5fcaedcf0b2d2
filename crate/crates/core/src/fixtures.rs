//! Synthetic scenes with known completions, used by the demo command and
//! the test suites.
//!
//! The occluded heightfield scene is a block-aligned terrain seen from
//! above: the prior holds one pixel per column whose point is the top
//! voxel, so everything below the surface is hidden from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flowcore::OracleField;
use crate::lattice::{DenseLatent, Dims, OccupancyGrid, SparseLatent};
use crate::priors::{Image, NormalizationBox, ScenePrior};
use crate::structedit::ToyCodec;

/// Feature written to channel 3 of every target voxel.
pub const TARGET_DEPTH_FEATURE: f32 = -0.5;

#[derive(Debug, Clone)]
pub struct SceneFixture {
    pub dims: Dims,
    pub prior: ScenePrior,
    pub bbox: NormalizationBox,
    /// Column heights in voxels, row-major over `(x, y)`.
    pub heights: Vec<usize>,
    pub target: OccupancyGrid,
    /// Target features on the dense occupancy lattice, zero outside.
    pub features: DenseLatent,
}

/// Block-aligned heightfield on the extended lattice of `dims`. Heights
/// are multiples of `r = M / N`, constant over `r x r` column blocks and at
/// least `r`, so the target is solid below the surface and block-constant.
pub fn occluded_scene(dims: Dims, seed: u64) -> Result<SceneFixture> {
    dims.validate()?;
    let r = dims.ratio();
    let [ex, ey, ez] = dims.occupancy_shape();
    let (bx, by) = (ex / r, ey / r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = dims.n.saturating_sub(1).max(1);
    let block_heights: Vec<usize> = (0..bx * by).map(|_| r * rng.random_range(1..=top)).collect();
    let block_colors: Vec<[f32; 3]> = (0..bx * by)
        .map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
        .collect();

    let mut heights = Vec::with_capacity(ex * ey);
    let mut colors = Vec::with_capacity(ex * ey);
    for x in 0..ex {
        for y in 0..ey {
            let b = (x / r) * by + y / r;
            heights.push(block_heights[b].min(ez));
            // a gentle gradient inside each block keeps the top view structured
            let shade = 0.05 * ((x % r) as f32 / r as f32) - 0.05 * ((y % r) as f32 / r as f32);
            let c = block_colors[b];
            colors.push([c[0] + shade, c[1], c[2] - shade]);
        }
    }

    let target = OccupancyGrid::from_fn([ex, ey, ez], |x, y, z| z < heights[x * ey + y]);
    let l = dims.l;
    let features = DenseLatent::from_fn([ex, ey, ez, l], |x, y, z, c| {
        if z >= heights[x * ey + y] {
            0.0
        } else if c < 3 {
            colors[x * ey + y][c]
        } else {
            TARGET_DEPTH_FEATURE
        }
    });

    // one pixel per column, rows = x; point = top voxel centre in scene units
    let m = dims.m as f32;
    let mut data = Vec::with_capacity(ex * ey * 3);
    let mut points = Vec::with_capacity(ex * ey);
    for x in 0..ex {
        for y in 0..ey {
            let h = heights[x * ey + y];
            data.extend_from_slice(&colors[x * ey + y]);
            points.push([(x as f32 + 0.5) / m, (y as f32 + 0.5) / m, (h as f32 - 0.5) / m]);
        }
    }
    let image = Image::from_vec(ex, ey, data)?;
    let mut camera = [0.0f32; 12];
    // orthographic top-down view: u = y, v = x
    camera[1] = 1.0;
    camera[4] = 1.0;
    camera[11] = 1.0;
    let prior = ScenePrior::new(image, points, vec![true; ex * ey], camera)?;
    let bbox = NormalizationBox::new([0.0; 3], [dims.a as f64, dims.b as f64, 1.0])?;
    Ok(SceneFixture {
        dims,
        prior,
        bbox,
        heights,
        target,
        features,
    })
}

impl SceneFixture {
    pub fn codec(&self) -> Result<ToyCodec> {
        ToyCodec::new(self.dims.ratio(), self.dims.c)
    }

    /// Encoded target occupancy (entries are exactly +-1).
    pub fn ss_target(&self) -> Result<DenseLatent> {
        self.codec()?.encode(&self.target)
    }

    /// Target structured latent over the target occupancy.
    pub fn slat_target(&self) -> Result<SparseLatent> {
        let coords = self.target.occupied_coords();
        let l = self.dims.l;
        let mut features = Vec::with_capacity(coords.len() * l);
        for c in &coords {
            let z = c[2] as usize;
            features.extend_from_slice(&self.features.column(c[0] as usize, c[1] as usize)[z * l..(z + 1) * l]);
        }
        SparseLatent::from_parts(self.dims.slat_extent(), l, coords, features)
    }

    pub fn oracle(&self, spread: f64) -> Result<OracleField> {
        Ok(OracleField::new(Some(self.ss_target()?), Some(self.slat_target()?)).with_spread(spread))
    }

    /// Voxels seen by the prior (the top surface).
    pub fn prior_voxels(&self) -> OccupancyGrid {
        let [ex, ey, ez] = self.dims.occupancy_shape();
        OccupancyGrid::from_fn([ex, ey, ez], |x, y, z| z + 1 == self.heights[x * ey + y])
    }

    /// Target voxels the prior does not see.
    pub fn hidden(&self) -> OccupancyGrid {
        let seen = self.prior_voxels();
        OccupancyGrid::from_fn(self.target.shape(), |x, y, z| self.target.get(x, y, z) && !seen.get(x, y, z))
    }
}

/// Fraction of `reference` voxels present in `grid`.
pub fn recall(grid: &OccupancyGrid, reference: &OccupancyGrid) -> f64 {
    let total = reference.count();
    if total == 0 {
        return 1.0;
    }
    let hit = reference
        .cells()
        .iter()
        .zip(grid.cells())
        .filter(|(&r, &g)| r && g)
        .count();
    hit as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{top_view_target, voxelize};

    fn small() -> Dims {
        Dims {
            a: 2,
            b: 1,
            n: 4,
            m: 8,
            c: 1,
            l: 4,
        }
    }

    #[test]
    fn prior_voxelizes_to_the_surface() {
        let f = occluded_scene(small(), 1).unwrap();
        let v = voxelize(&f.prior.valid_points(), &f.bbox, f.dims.occupancy_shape());
        assert_eq!(v.clamped, 0);
        assert_eq!(v.grid, f.prior_voxels());
        assert_eq!(f.hidden().count() + f.prior_voxels().count(), f.target.count());
    }

    #[test]
    fn target_is_block_constant() {
        let f = occluded_scene(small(), 2).unwrap();
        let codec = f.codec().unwrap();
        let z = f.ss_target().unwrap();
        assert!(z.data().iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(codec.decode(&z).unwrap(), f.target);
    }

    #[test]
    fn top_view_matches_prior_image() {
        let f = occluded_scene(small(), 3).unwrap();
        let t = top_view_target(&f.prior, &f.bbox, f.dims.occupancy_shape());
        assert_eq!(t, f.prior.image);
        let slat = f.slat_target().unwrap();
        assert_eq!(slat.len(), f.target.count());
    }

    #[test]
    fn recall_counts() {
        let a = OccupancyGrid::from_fn([2, 2, 2], |x, _, _| x == 0);
        let b = OccupancyGrid::from_fn([2, 2, 2], |_, y, _| y == 0);
        assert_eq!(recall(&a, &b), 0.5);
        assert_eq!(recall(&a, &OccupancyGrid::empty([2, 2, 2])), 1.0);
    }
}
