//! Toy occupancy codec, under-noised SDEdit and the iterative SDEdit loop
//! that grows the sparse structure from a partial voxelized prior.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowcore::{euler_integrate, extended_field_dense, mixed_field, Conditioning, DilationSettings, FieldEngine};
use crate::lattice::{lerp_latent, DenseLatent, OccupancyGrid, Schedule};
use crate::patchwork::PatchGrid;

/// Linear stand-in for the occupancy autoencoder. Encoding averages each
/// `r^3` block and maps the fraction `o` to `2o - 1`; decoding averages
/// channels and upsamples nearest-neighbour, so a voxel is occupied iff
/// its block was more than half full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyCodec {
    ratio: usize,
    channels: usize,
}

impl ToyCodec {
    pub fn new(ratio: usize, channels: usize) -> Result<Self> {
        if ratio == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "codec needs ratio and channels >= 1, got {ratio} and {channels}"
            )));
        }
        Ok(ToyCodec { ratio, channels })
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn latent_shape(&self, occupancy: [usize; 3]) -> Result<[usize; 4]> {
        let r = self.ratio;
        if occupancy.iter().any(|&s| s % r != 0) {
            return Err(Error::Dimension(format!(
                "occupancy shape {occupancy:?} is not a multiple of the block size {r}"
            )));
        }
        Ok([occupancy[0] / r, occupancy[1] / r, occupancy[2] / r, self.channels])
    }

    pub fn encode(&self, grid: &OccupancyGrid) -> Result<DenseLatent> {
        let shape = self.latent_shape(grid.shape())?;
        let r = self.ratio;
        let volume = (r * r * r) as f64;
        let mut out = DenseLatent::zeros(shape);
        for bx in 0..shape[0] {
            for by in 0..shape[1] {
                for bz in 0..shape[2] {
                    let mut hits = 0usize;
                    for x in bx * r..(bx + 1) * r {
                        for y in by * r..(by + 1) * r {
                            for z in bz * r..(bz + 1) * r {
                                hits += grid.get(x, y, z) as usize;
                            }
                        }
                    }
                    let v = (2.0 * hits as f64 / volume - 1.0) as f32;
                    for c in 0..shape[3] {
                        out.set(bx, by, bz, c, v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Block logits (channel mean) before upsampling, shape `(x, y, z)`.
    pub fn block_logits(&self, z: &DenseLatent) -> Result<Vec<f64>> {
        let [_, _, _, c] = z.shape();
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "latent has {c} channels, codec expects {}",
                self.channels
            )));
        }
        Ok(z
            .data()
            .chunks_exact(c)
            .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / c as f64)
            .collect())
    }

    pub fn decode_logits(&self, z: &DenseLatent) -> Result<LogitGrid> {
        let blocks = self.block_logits(z)?;
        let [sx, sy, sz, _] = z.shape();
        let r = self.ratio;
        let shape = [sx * r, sy * r, sz * r];
        let mut data = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for zz in 0..shape[2] {
                    data.push(blocks[((x / r) * sy + y / r) * sz + zz / r]);
                }
            }
        }
        Ok(LogitGrid { shape, data })
    }

    pub fn decode(&self, z: &DenseLatent) -> Result<OccupancyGrid> {
        Ok(self.decode_logits(z)?.occupancy())
    }
}

/// Real-valued voxel logits; occupancy is the strictly positive set.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl LogitGrid {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[(x * self.shape[1] + y) * self.shape[2] + z]
    }

    pub fn occupancy(&self) -> OccupancyGrid {
        OccupancyGrid::from_fn(self.shape, |x, y, z| self.get(x, y, z) > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeditParams {
    pub t_start: f64,
    pub t_noise: f64,
    pub n_iter: usize,
    /// Permit `t_noise > t_start` (over-noising), used only for ablations.
    #[serde(default)]
    pub allow_over_noise: bool,
}

impl Default for SdeditParams {
    fn default() -> Self {
        SdeditParams {
            t_start: 0.8,
            t_noise: 0.6,
            n_iter: 2,
            allow_over_noise: false,
        }
    }
}

impl SdeditParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_start > 0.0 && self.t_start <= 1.0) {
            return Err(Error::Parameter(format!("t_start = {} outside (0, 1]", self.t_start)));
        }
        if !(0.0..=1.0).contains(&self.t_noise) {
            return Err(Error::Parameter(format!("t_noise = {} outside [0, 1]", self.t_noise)));
        }
        if self.t_noise > self.t_start && !self.allow_over_noise {
            return Err(Error::Parameter(format!(
                "t_noise = {} exceeds t_start = {}",
                self.t_noise, self.t_start
            )));
        }
        Ok(())
    }
}

/// `(1 - t_noise) * guide + t_noise * eps` with `eps` drawn from `seed`.
pub fn under_noise(guide: &DenseLatent, params: &SdeditParams, seed: u64) -> Result<DenseLatent> {
    params.validate()?;
    let eps = DenseLatent::gaussian(guide.shape(), seed);
    lerp_latent(guide, &eps, params.t_noise)
}

/// The sparse-structure field: patch-wise, optionally mixed with dilated
/// sampling when `alpha` is set.
pub struct SsField<'a> {
    pub engine: &'a FieldEngine,
    pub grid: &'a PatchGrid,
    pub conditioning: &'a Conditioning,
    pub alpha: Option<f64>,
}

impl SsField<'_> {
    pub fn eval(&self, z: &DenseLatent, t: f64, step: usize, seed: u64) -> Result<DenseLatent> {
        match self.alpha {
            Some(alpha) => {
                let dilation = DilationSettings { alpha, seed };
                mixed_field(self.engine, z, self.grid, self.conditioning, t, &dilation, step)
            }
            None => extended_field_dense(self.engine, z, self.grid, self.conditioning, t),
        }
    }
}

/// Position of a step inside the iterative loop, handed to step hooks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub round: usize,
    pub step: usize,
    pub t: f64,
}

const DILATION_SALT: u64 = 0xD11A_7ED5_A3B1_E5C0;

/// One SDEdit round: encode, under-noise, integrate from `t_start`,
/// decode and threshold.
#[allow(clippy::too_many_arguments)]
pub fn sdedit_round<H>(
    input: &OccupancyGrid,
    codec: &ToyCodec,
    params: &SdeditParams,
    schedule: &Schedule,
    field: &SsField<'_>,
    round: usize,
    seed: u64,
    hook: &mut H,
) -> Result<OccupancyGrid>
where
    H: FnMut(StepInfo, &DenseLatent, DenseLatent) -> Result<DenseLatent>,
{
    params.validate()?;
    if (schedule.start() - params.t_start).abs() > 1e-12 {
        return Err(Error::Schedule(format!(
            "schedule starts at {} but t_start = {}",
            schedule.start(),
            params.t_start
        )));
    }
    let guide = codec.encode(input)?;
    if guide.shape() != field.grid_shape(codec.channels()) {
        return Err(Error::Dimension(format!(
            "guide latent {:?} does not match the extended lattice",
            guide.shape()
        )));
    }
    let start = under_noise(&guide, params, seed)?;
    let dilation_seed = seed ^ DILATION_SALT;
    let z0 = euler_integrate(
        start,
        schedule,
        |step, t, z| field.eval(z, t, step, dilation_seed),
        |step, t, z, v| hook(StepInfo { round, step, t }, z, v),
    )?;
    codec.decode(&z0)
}

impl SsField<'_> {
    fn grid_shape(&self, channels: usize) -> [usize; 4] {
        let [x, y, z] = self.grid.extent();
        [x, y, z, channels]
    }
}

/// Outcome of the iterative loop: the final grid and the occupied-voxel
/// count after every round (entry 0 is the input).
#[derive(Debug, Clone, PartialEq)]
pub struct SdeditRun {
    pub grid: OccupancyGrid,
    pub counts: Vec<usize>,
}

impl SdeditRun {
    pub fn coords(&self) -> Vec<[u32; 3]> {
        self.grid.occupied_coords()
    }
}

/// Chains `params.n_iter` rounds, each re-encoding the previous output.
/// Round noise comes from a ChaCha stream seeded with `seed`.
pub fn iterative_sdedit<H>(
    initial: &OccupancyGrid,
    codec: &ToyCodec,
    params: &SdeditParams,
    schedule: &Schedule,
    field: &SsField<'_>,
    seed: u64,
    mut hook: H,
) -> Result<SdeditRun>
where
    H: FnMut(StepInfo, &DenseLatent, DenseLatent) -> Result<DenseLatent>,
{
    params.validate()?;
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = initial.clone();
    let mut counts = vec![grid.count()];
    for round in 0..params.n_iter {
        let round_seed = stream.next_u64();
        grid = sdedit_round(&grid, codec, params, schedule, field, round, round_seed, &mut hook)?;
        log::debug!("sdedit round {round}: {} occupied voxels", grid.count());
        counts.push(grid.count());
    }
    Ok(SdeditRun { grid, counts })
}

/// Hook that applies the field unchanged.
pub fn pass_through(_: StepInfo, _: &DenseLatent, v: DenseLatent) -> Result<DenseLatent> {
    Ok(v)
}
