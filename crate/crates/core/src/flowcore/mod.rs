//! Vector-field providers, the overlapping patch-wise extended field, its
//! dilated mixture, and explicit Euler integration.

mod provider;

pub use provider::{OracleField, PatchLatent, Placement, VectorFieldProvider, ZeroField};

use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{DenseLatent, Schedule, SparseLatent};
use crate::patchwork::{
    dilated_partition, gather_dilated, merge_dense, merge_sparse, patch_dense, patch_sparse, scatter_dilated,
    PatchGrid,
};
use crate::priors::ConditionEmbedding;

/// Runs provider evaluations on a fixed-size worker pool. Results always
/// come back in request order, so downstream reductions see the same
/// summation order regardless of the worker count.
pub struct FieldEngine {
    provider: Arc<dyn VectorFieldProvider>,
    pool: rayon::ThreadPool,
    serial: Mutex<()>,
    workers: usize,
}

impl FieldEngine {
    pub fn new(provider: Arc<dyn VectorFieldProvider>, workers: usize) -> Result<Self> {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|n| format!("field-worker-{n}"))
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        Ok(FieldEngine {
            provider,
            pool,
            serial: Mutex::new(()),
            workers,
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn provider(&self) -> &Arc<dyn VectorFieldProvider> {
        &self.provider
    }

    fn call(&self, latent: &PatchLatent, condition: &ConditionEmbedding, t: f32) -> Result<PatchLatent> {
        let out = if self.provider.concurrent() {
            self.provider.evaluate(latent, condition, t)?
        } else {
            let _guard = self.serial.lock().unwrap_or_else(|e| e.into_inner());
            self.provider.evaluate(latent, condition, t)?
        };
        if !latent.same_layout(&out) {
            return Err(Error::Protocol("provider returned a vector with a different layout".into()));
        }
        Ok(out)
    }

    /// Evaluates every `(latent, condition)` pair at time `t`. The error of
    /// the first failing request (in request order) is returned with its
    /// index.
    pub fn evaluate_all(
        &self,
        requests: &[(PatchLatent, &ConditionEmbedding)],
        t: f64,
    ) -> std::result::Result<Vec<PatchLatent>, (usize, Error)> {
        let t = t as f32;
        let results: Vec<Result<PatchLatent>> = if self.workers == 1 {
            requests.iter().map(|(z, c)| self.call(z, c, t)).collect()
        } else {
            self.pool
                .install(|| requests.par_iter().map(|(z, c)| self.call(z, c, t)).collect())
        };
        results
            .into_iter()
            .enumerate()
            .map(|(n, r)| r.map_err(|e| (n, e)))
            .collect()
    }
}

/// Per-window conditions (in grid order) plus the un-patchified condition
/// used for dilated samples.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub windows: Vec<ConditionEmbedding>,
    pub global: ConditionEmbedding,
    /// Attach a [`Placement`] trailer to dilated-sample conditions.
    pub placement: bool,
}

fn patch_error(grid: &PatchGrid, n: usize, e: Error) -> Error {
    let w = grid.windows()[n];
    Error::Patch {
        i: w.i,
        j: w.j,
        source: Box::new(e),
    }
}

/// Patch-wise field on a dense extended latent: every window is evaluated
/// on its own restriction and the results are averaged over the overlaps.
pub fn extended_field_dense(
    engine: &FieldEngine,
    z: &DenseLatent,
    grid: &PatchGrid,
    conditioning: &Conditioning,
    t: f64,
) -> Result<DenseLatent> {
    check_time(t)?;
    check_conditions(grid, conditioning)?;
    let requests: Vec<(PatchLatent, &ConditionEmbedding)> = grid
        .windows()
        .iter()
        .zip(&conditioning.windows)
        .map(|(w, c)| Ok((PatchLatent::Dense(patch_dense(z, w)?), c)))
        .collect::<Result<_>>()?;
    let vectors = engine
        .evaluate_all(&requests, t)
        .map_err(|(n, e)| patch_error(grid, n, e))?;
    let vectors: Vec<DenseLatent> = vectors
        .into_iter()
        .map(PatchLatent::into_dense)
        .collect::<Result<_>>()?;
    merge_dense(&vectors, grid)
}

/// Patch-wise field on a sparse extended latent.
pub fn extended_field_sparse(
    engine: &FieldEngine,
    z: &SparseLatent,
    grid: &PatchGrid,
    conditioning: &Conditioning,
    t: f64,
) -> Result<SparseLatent> {
    check_time(t)?;
    check_conditions(grid, conditioning)?;
    let requests: Vec<(PatchLatent, &ConditionEmbedding)> = grid
        .windows()
        .iter()
        .zip(&conditioning.windows)
        .map(|(w, c)| (PatchLatent::Sparse(patch_sparse(z, w)), c))
        .collect();
    let vectors = engine
        .evaluate_all(&requests, t)
        .map_err(|(n, e)| patch_error(grid, n, e))?;
    let vectors: Vec<SparseLatent> = vectors
        .into_iter()
        .map(PatchLatent::into_sparse)
        .collect::<Result<_>>()?;
    merge_sparse(&vectors, grid, z)
}

fn check_conditions(grid: &PatchGrid, conditioning: &Conditioning) -> Result<()> {
    if conditioning.windows.len() != grid.len() {
        return Err(Error::Config(format!(
            "{} window conditions for {} windows",
            conditioning.windows.len(),
            grid.len()
        )));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Singularity(t));
    }
    Ok(())
}

/// Mixing weight of the dilated field: `0.5 * cos(pi - pi*t)^alpha + 0.5`.
///
/// Integer exponents use an exact integer power; other exponents use a
/// sign-preserving power so the weight stays real for `t < 0.5`.
pub fn gamma(t: f64, alpha: f64) -> f64 {
    let c = (std::f64::consts::PI - std::f64::consts::PI * t).cos();
    let p = if alpha.fract() == 0.0 && alpha.abs() <= i32::MAX as f64 {
        c.powi(alpha as i32)
    } else {
        c.signum() * c.abs().powf(alpha)
    };
    0.5 * p + 0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DilationSettings {
    pub alpha: f64,
    pub seed: u64,
}

impl DilationSettings {
    /// Partition seed for the given Euler step; fresh pillars every step.
    pub fn step_seed(&self, step: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(step as u64)
            .rotate_left(17)
    }
}

/// Field evaluated on the `a*b` dilated samples, conditioned on the whole
/// image, and scattered back onto the extended lattice.
pub fn dilated_field(
    engine: &FieldEngine,
    z: &DenseLatent,
    grid: &PatchGrid,
    conditioning: &Conditioning,
    t: f64,
    seed: u64,
) -> Result<DenseLatent> {
    check_time(t)?;
    let partition = dilated_partition(grid.a(), grid.b(), grid.k(), seed);
    let samples = gather_dilated(z, &partition)?;
    let conditions: Vec<ConditionEmbedding> = (0..partition.sample_count())
        .map(|s| {
            if conditioning.placement {
                Placement {
                    k: partition.k() as u32,
                    columns: partition.columns(s).to_vec(),
                }
                .attach(&conditioning.global)
            } else {
                conditioning.global.clone()
            }
        })
        .collect();
    let requests: Vec<(PatchLatent, &ConditionEmbedding)> = samples
        .into_iter()
        .zip(&conditions)
        .map(|(s, c)| (PatchLatent::Dense(s), c))
        .collect();
    let vectors = engine
        .evaluate_all(&requests, t)
        .map_err(|(n, e)| Error::Provider(format!("dilated sample {n}: {e}")))?;
    let vectors: Vec<DenseLatent> = vectors
        .into_iter()
        .map(PatchLatent::into_dense)
        .collect::<Result<_>>()?;
    scatter_dilated(&vectors, &partition)
}

/// `(1 - gamma_t) * PatchWise + gamma_t * Dilated`. The dilated branch is
/// skipped when its weight is exactly zero, and the patch-wise branch when
/// its weight is exactly zero.
pub fn mixed_field(
    engine: &FieldEngine,
    z: &DenseLatent,
    grid: &PatchGrid,
    conditioning: &Conditioning,
    t: f64,
    dilation: &DilationSettings,
    step: usize,
) -> Result<DenseLatent> {
    let g = gamma(t, dilation.alpha);
    if g == 0.0 {
        return extended_field_dense(engine, z, grid, conditioning, t);
    }
    let dilated = dilated_field(engine, z, grid, conditioning, t, dilation.step_seed(step))?;
    if g == 1.0 {
        return Ok(dilated);
    }
    let patchwise = extended_field_dense(engine, z, grid, conditioning, t)?;
    let data = patchwise
        .data()
        .iter()
        .zip(dilated.data())
        .map(|(&p, &d)| ((1.0 - g) * p as f64 + g * d as f64) as f32)
        .collect();
    DenseLatent::from_vec(z.shape(), data)
}

/// States that can be advanced by an Euler step.
pub trait FlowState: Clone {
    fn axpy(&self, alpha: f64, other: &Self) -> Result<Self>;
    fn is_finite(&self) -> bool;
}

impl FlowState for DenseLatent {
    fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        DenseLatent::axpy(self, alpha, other)
    }

    fn is_finite(&self) -> bool {
        DenseLatent::is_finite(self)
    }
}

impl FlowState for SparseLatent {
    fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        SparseLatent::axpy(self, alpha, other)
    }

    fn is_finite(&self) -> bool {
        SparseLatent::is_finite(self)
    }
}

/// Explicit Euler over `schedule`. At step `m` the raw field
/// `field(m, t_m, Z)` is passed through `hook(m, t_m, Z, v)` and the state
/// moves by `(t_{m+1} - t_m) * v̂`.
pub fn euler_integrate<S, F, H>(start: S, schedule: &Schedule, mut field: F, mut hook: H) -> Result<S>
where
    S: FlowState,
    F: FnMut(usize, f64, &S) -> Result<S>,
    H: FnMut(usize, f64, &S, S) -> Result<S>,
{
    let times = schedule.times();
    let mut state = start;
    for m in 0..times.len() - 1 {
        let (t, next) = (times[m], times[m + 1]);
        let raw = field(m, t, &state)?;
        let applied = hook(m, t, &state, raw)?;
        state = state.axpy(next - t, &applied)?;
        if !state.is_finite() {
            return Err(Error::Divergence { step: m });
        }
    }
    Ok(state)
}

/// Identity step hook.
pub fn no_hook<S>(_: usize, _: f64, _: &S, v: S) -> Result<S> {
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchwork::make_patch_grid;

    fn conditioning_for(grid: &PatchGrid, placement: bool) -> Conditioning {
        let base = ConditionEmbedding::from_f32s(&[0.5; 11]);
        let windows = grid
            .windows()
            .iter()
            .map(|w| {
                if placement {
                    Placement::window(w.x0(), w.y0(), w.k).attach(&base)
                } else {
                    base.clone()
                }
            })
            .collect();
        Conditioning {
            windows,
            global: base,
            placement,
        }
    }

    #[test]
    fn gamma_values() {
        for alpha in [1.0, 2.0, 5.0, 2.5] {
            assert_eq!(gamma(1.0, alpha), 1.0);
        }
        assert_eq!(gamma(0.0, 5.0), 0.0);
        assert!((gamma(0.5, 5.0) - 0.5).abs() < 1e-15);
        let mut prev = gamma(0.0, 5.0);
        for n in 1..=1000 {
            let g = gamma(n as f64 / 1000.0, 5.0);
            assert!(g >= prev, "gamma decreased at t = {}", n as f64 / 1000.0);
            prev = g;
        }
        assert!(gamma(0.2, 2.5).is_finite());
    }

    #[test]
    fn extended_field_of_global_oracle_is_exact() {
        let grid = make_patch_grid(2, 3, 2, 4).unwrap();
        let [x, y, z] = grid.extent();
        let target = DenseLatent::gaussian([x, y, z, 2], 1);
        let state = DenseLatent::gaussian([x, y, z, 2], 2);
        let oracle = Arc::new(OracleField::new(Some(target), None));
        let engine = FieldEngine::new(oracle.clone(), 3).unwrap();
        let cond = conditioning_for(&grid, true);
        let t = 0.35f32 as f64;
        let v = extended_field_dense(&engine, &state, &grid, &cond, t).unwrap();
        assert_eq!(v, oracle.eval_global_dense(&state, t).unwrap());
    }

    #[test]
    fn single_window_equals_provider_output() {
        let grid = make_patch_grid(1, 1, 4, 4).unwrap();
        let target = DenseLatent::gaussian([4, 4, 4, 1], 1);
        let state = DenseLatent::gaussian([4, 4, 4, 1], 2);
        let oracle = Arc::new(OracleField::new(Some(target), None));
        let engine = FieldEngine::new(oracle.clone(), 1).unwrap();
        let cond = conditioning_for(&grid, true);
        let v = extended_field_dense(&engine, &state, &grid, &cond, 0.5).unwrap();
        let direct = oracle
            .evaluate(&PatchLatent::Dense(state), &cond.windows[0], 0.5)
            .unwrap()
            .into_dense()
            .unwrap();
        assert_eq!(v, direct);
    }

    #[test]
    fn zero_provider_gives_zero_field() {
        let grid = make_patch_grid(2, 2, 2, 4).unwrap();
        let engine = FieldEngine::new(Arc::new(ZeroField), 2).unwrap();
        let state = DenseLatent::gaussian([8, 8, 4, 1], 3);
        let v = extended_field_dense(&engine, &state, &grid, &conditioning_for(&grid, false), 0.7).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn provider_failure_carries_patch_index() {
        let grid = make_patch_grid(2, 2, 2, 4).unwrap();
        // the oracle cannot locate patches without placement trailers
        let engine = FieldEngine::new(Arc::new(OracleField::new(Some(DenseLatent::zeros([8, 8, 4, 1])), None)), 1)
            .unwrap();
        let state = DenseLatent::zeros([8, 8, 4, 1]);
        match extended_field_dense(&engine, &state, &grid, &conditioning_for(&grid, false), 0.5) {
            Err(Error::Patch { i: 0, j: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn worker_count_does_not_change_the_merge() {
        let grid = make_patch_grid(3, 2, 4, 4).unwrap();
        let [x, y, z] = grid.extent();
        let target = DenseLatent::gaussian([x, y, z, 1], 7);
        let state = DenseLatent::gaussian([x, y, z, 1], 8);
        let oracle: Arc<dyn VectorFieldProvider> = Arc::new(OracleField::new(Some(target), None).with_spread(0.4));
        let cond = conditioning_for(&grid, true);
        let one = FieldEngine::new(oracle.clone(), 1).unwrap();
        let eight = FieldEngine::new(oracle, 8).unwrap();
        assert_eq!(
            extended_field_dense(&one, &state, &grid, &cond, 0.6).unwrap(),
            extended_field_dense(&eight, &state, &grid, &cond, 0.6).unwrap()
        );
    }

    #[test]
    fn mixed_field_limits() {
        let grid = make_patch_grid(2, 2, 2, 4).unwrap();
        let target = DenseLatent::gaussian([8, 8, 4, 1], 1);
        let state = DenseLatent::gaussian([8, 8, 4, 1], 2);
        let oracle = Arc::new(OracleField::new(Some(target), None));
        let engine = FieldEngine::new(oracle.clone(), 2).unwrap();
        let cond = conditioning_for(&grid, true);
        let dil = DilationSettings { alpha: 5.0, seed: 3 };
        let t = 1.0;
        let mixed = mixed_field(&engine, &state, &grid, &cond, t, &dil, 0).unwrap();
        let pure = dilated_field(&engine, &state, &grid, &cond, t, dil.step_seed(0)).unwrap();
        assert_eq!(mixed, pure);
        // both branches agree for a global oracle, so every mixture equals either
        let t = 0.4f32 as f64;
        let mixed = mixed_field(&engine, &state, &grid, &cond, t, &dil, 5).unwrap();
        let pw = extended_field_dense(&engine, &state, &grid, &cond, t).unwrap();
        assert!(mixed.max_abs_diff(&pw).unwrap() < 1e-6);
        // alpha chosen so that gamma == 0 at t: falls back to the patch-wise field
        let never = DilationSettings { alpha: f64::INFINITY, seed: 3 };
        assert_eq!(gamma(0.4, f64::INFINITY), 0.5);
        let _ = never;
    }

    #[test]
    fn euler_with_oracle_lands_on_target() {
        let target = DenseLatent::gaussian([4, 4, 4, 1], 10);
        let start = DenseLatent::gaussian([4, 4, 4, 1], 11);
        let oracle = OracleField::new(Some(target.clone()), None);
        for k in [2, 3, 25, 51] {
            let schedule = Schedule::uniform(1.0, k).unwrap();
            let out = euler_integrate(start.clone(), &schedule, |_, t, z| oracle.eval_global_dense(z, t), no_hook)
                .unwrap();
            assert!(out.max_abs_diff(&target).unwrap() <= 1e-5, "k = {k}");
        }
    }

    #[test]
    fn euler_zero_field_is_identity() {
        let start = DenseLatent::gaussian([3, 3, 3, 1], 1);
        let schedule = Schedule::uniform(0.8, 10).unwrap();
        let out = euler_integrate(start.clone(), &schedule, |_, _, z| Ok(DenseLatent::zeros(z.shape())), no_hook)
            .unwrap();
        assert_eq!(out, start);
    }

    #[test]
    fn euler_reports_divergence_step() {
        let start = DenseLatent::filled([1, 1, 1, 1], 1.0);
        let schedule = Schedule::uniform(1.0, 5).unwrap();
        let r = euler_integrate(
            start,
            &schedule,
            |m, _, z| {
                let v = if m == 2 { f32::MAX } else { 0.0 };
                Ok(DenseLatent::filled(z.shape(), v))
            },
            |_, _, _, v: DenseLatent| Ok(v.axpy(1e30, &v).unwrap_or(v)),
        );
        assert!(matches!(r, Err(Error::Divergence { step: 2 })));
    }
}
