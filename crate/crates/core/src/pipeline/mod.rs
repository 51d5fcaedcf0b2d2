//! End-to-end generation: sparse structure by iterative under-noised
//! SDEdit, structured latent by patch-wise flow, then SDF merge and export.

mod config;

pub use config::{load_oracle, sparse_from_dense, PipelineConfig, ProviderSpec, Seeds};

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::decode::{export_slat, merge_sdf_patches, toy_decode_sdf, SdfGrid};
use crate::error::{Error, Result};
use crate::fixtures::occluded_scene;
use crate::flowcore::{extended_field_sparse, euler_integrate, Conditioning, FieldEngine, Placement, VectorFieldProvider};
use crate::lattice::{init_sparse_noise, Dims, OccupancyGrid, RawTensor, Schedule, SparseLatent};
use crate::optimizer::{
    dense_to_f64, optimize_with_state, sparse_to_f64, trace_csv, FloatImage, LossRecord, OptimState, SlatObjective,
    SsLoss,
};
use crate::patchwork::{make_patch_grid, patch_sparse, PatchGrid};
use crate::priors::{
    image_patchify, load_scene_prior, toy_condition, top_view_target, voxel_multiset, voxelize, NormalizationBox,
    ScenePrior,
};
use crate::structedit::{iterative_sdedit, SsField, StepInfo};

/// Relative margin used when the normalization box is fitted to the prior.
pub const FIT_MARGIN: f64 = 0.02;

/// Per-window conditions for `grid`: the toy embedding of each window's
/// image patch, or of the whole image when no pixel lands in the window.
pub fn build_conditioning(
    prior: &ScenePrior,
    bbox: &NormalizationBox,
    grid: &PatchGrid,
    placement: bool,
) -> Conditioning {
    let global = toy_condition(&prior.image);
    let windows = grid
        .windows()
        .iter()
        .enumerate()
        .map(|(n, w)| {
            let patch = image_patchify(prior, bbox, grid, n);
            let base = if patch.empty { global.clone() } else { toy_condition(&patch.image) };
            if placement {
                Placement::window(w.x0(), w.y0(), w.k).attach(&base)
            } else {
                base
            }
        })
        .collect();
    Conditioning {
        windows,
        global,
        placement,
    }
}

/// Provider plus worker pool, shared by both flow stages.
pub struct Runtime {
    pub engine: FieldEngine,
    /// Whether window conditions carry a placement trailer.
    pub placement: bool,
}

impl Runtime {
    pub fn new(provider: Arc<dyn VectorFieldProvider>, placement: bool, workers: usize) -> Result<Self> {
        Ok(Runtime {
            engine: FieldEngine::new(provider, workers)?,
            placement,
        })
    }

    pub fn from_config(config: &PipelineConfig) -> Result<Self> {
        let (provider, placement) = config.build_provider()?;
        Self::new(provider, placement, config.workers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseStructure {
    /// Voxelized prior the loop starts from.
    pub initial: OccupancyGrid,
    pub grid: OccupancyGrid,
    /// Occupied voxels after each round; entry 0 is the voxelized prior.
    pub counts: Vec<usize>,
    pub losses: Vec<LossRecord>,
    /// Prior points that fell outside the normalization box.
    pub clamped: usize,
}

impl SparseStructure {
    pub fn coords(&self) -> Vec<[u32; 3]> {
        self.grid.occupied_coords()
    }
}

/// The normalization box of the run: configured, or fitted to the prior.
pub fn scene_box(prior: &ScenePrior, config: &PipelineConfig) -> Result<NormalizationBox> {
    match &config.normalization_box {
        Some(b) => Ok(*b),
        None => NormalizationBox::fit(&prior.valid_points(), FIT_MARGIN),
    }
}

pub fn generate_sparse_structure(
    prior: &ScenePrior,
    bbox: &NormalizationBox,
    config: &PipelineConfig,
    runtime: &Runtime,
) -> Result<SparseStructure> {
    config.validate()?;
    let dims = config.dims;
    let codec = config.codec()?;
    let points = prior.valid_points();
    let shape = dims.occupancy_shape();
    let vox = voxelize(&points, bbox, shape);
    if vox.clamped > 0 {
        log::warn!("{} prior points outside the normalization box were clamped", vox.clamped);
    }
    let multiset = voxel_multiset(&points, bbox, shape);

    let grid = make_patch_grid(dims.a, dims.b, config.d, dims.n)?;
    let conditioning = build_conditioning(prior, bbox, &grid, runtime.placement);
    let field = SsField {
        engine: &runtime.engine,
        grid: &grid,
        conditioning: &conditioning,
        alpha: config.dilated_enabled.then_some(config.alpha),
    };
    let params = config.sdedit();
    let schedule = Schedule::uniform(config.t_start, config.k)?;

    let adam = config.ss_adam;
    let last_round = params.n_iter.saturating_sub(1);
    let mut losses = Vec::new();
    let mut state: Option<OptimState> = None;
    let hook = |info: StepInfo, z: &crate::lattice::DenseLatent, v: crate::lattice::DenseLatent| {
        let active = adam.steps > 0 && (config.optimize_every_round || info.round == last_round);
        if !active {
            return Ok(v);
        }
        let objective = SsLoss::new(z, info.t, &multiset, &codec)?;
        let st = match (&mut state, adam.reset_state) {
            (Some(s), false) if s.len() == v.len() => s,
            (slot, _) => slot.insert(OptimState::new(v.len())),
        };
        let out = optimize_with_state(dense_to_f64(&v), &objective, &adam, st)?;
        losses.push(LossRecord {
            round: info.round,
            step: info.step,
            t: info.t,
            loss: *out.losses.last().expect("at least one loss"),
        });
        crate::lattice::DenseLatent::from_vec(v.shape(), out.x.iter().map(|&x| x as f32).collect())
    };
    let run = iterative_sdedit(&vox.grid, &codec, &params, &schedule, &field, config.seeds.sdedit, hook)?;
    Ok(SparseStructure {
        initial: vox.grid,
        grid: run.grid,
        counts: run.counts,
        losses,
        clamped: vox.clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredLatent {
    pub slat: SparseLatent,
    pub losses: Vec<LossRecord>,
}

/// Denoises features on the fixed coordinate set from pure noise at `t = 1`.
pub fn generate_slat(
    coords: &[[u32; 3]],
    prior: &ScenePrior,
    bbox: &NormalizationBox,
    config: &PipelineConfig,
    runtime: &Runtime,
) -> Result<StructuredLatent> {
    config.validate()?;
    if coords.is_empty() {
        return Err(Error::Parameter("structured latent needs a non-empty coordinate set".into()));
    }
    let dims = config.dims;
    let extent = dims.slat_extent();
    let start = init_sparse_noise(coords, extent, dims.l, config.seeds.slat)?;
    let grid = make_patch_grid(dims.a, dims.b, config.d, dims.m)?;
    let conditioning = build_conditioning(prior, bbox, &grid, runtime.placement);
    let schedule = Schedule::uniform(1.0, config.k)?;
    let target = FloatImage::from(&top_view_target(prior, bbox, dims.occupancy_shape()));

    let adam = config.slat_adam;
    let weights = config.weights;
    let mut losses = Vec::new();
    let mut state: Option<OptimState> = None;
    let slat = euler_integrate(
        start,
        &schedule,
        |_, t, z| extended_field_sparse(&runtime.engine, z, &grid, &conditioning, t),
        |step, t, z: &SparseLatent, v: SparseLatent| {
            if adam.steps == 0 || v.width() == 0 {
                return Ok(v);
            }
            let objective = SlatObjective::new(z, t, &target, weights)?;
            let st = match (&mut state, adam.reset_state) {
                (Some(s), false) => s,
                (slot, _) => slot.insert(OptimState::new(v.features().len())),
            };
            let out = optimize_with_state(sparse_to_f64(&v), &objective, &adam, st)?;
            losses.push(LossRecord {
                round: 0,
                step,
                t,
                loss: *out.losses.last().expect("at least one loss"),
            });
            v.with_features(out.x.iter().map(|&x| x as f32).collect())
        },
    )?;
    Ok(StructuredLatent { slat, losses })
}

/// Decodes every window of the structured latent to an SDF patch and blends
/// the patches with cosine weights.
pub fn decode_merged_sdf(slat: &SparseLatent, dims: &Dims, d: usize) -> Result<SdfGrid> {
    let grid = make_patch_grid(dims.a, dims.b, d, dims.m)?;
    let patches: Vec<SdfGrid> = grid
        .windows()
        .iter()
        .map(|w| toy_decode_sdf(&patch_sparse(slat, w)))
        .collect();
    merge_sdf_patches(&patches, &grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub bbox: NormalizationBox,
    pub structure: SparseStructure,
    pub latent: StructuredLatent,
    pub sdf: SdfGrid,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq, Default)]
pub struct OutputPaths {
    pub scene_ply: Option<PathBuf>,
    pub sdf_xlt: Option<PathBuf>,
    pub occupancy_xlt: Option<PathBuf>,
    pub loss_trace_csv: Option<PathBuf>,
}

/// Summary of a run. Stages appear in execution order; a failed run keeps
/// what finished and names the error.
#[derive(Debug, Clone, Serialize, PartialEq, Default)]
pub struct RunReport {
    pub stages: Vec<StageTiming>,
    pub round_counts: Vec<usize>,
    pub clamped_points: usize,
    pub slat_entries: usize,
    pub ss_losses: Vec<LossRecord>,
    pub slat_losses: Vec<LossRecord>,
    pub outputs: OutputPaths,
    pub error: Option<String>,
}

impl RunReport {
    fn timed<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs the three generation stages in memory, recording into `report`.
pub fn run_pipeline(
    prior: &ScenePrior,
    config: &PipelineConfig,
    runtime: &Runtime,
    report: &mut RunReport,
) -> Result<PipelineOutput> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let bbox = scene_box(prior, config).map_err(|e| e.in_stage("config"))?;
    let structure = report.timed("sparse_structure", || {
        generate_sparse_structure(prior, &bbox, config, runtime)
    })?;
    report.round_counts = structure.counts.clone();
    report.clamped_points = structure.clamped;
    report.ss_losses = structure.losses.clone();
    let coords = structure.coords();
    let latent = report.timed("structured_latent", || generate_slat(&coords, prior, &bbox, config, runtime))?;
    report.slat_entries = latent.slat.len();
    report.slat_losses = latent.losses.clone();
    let sdf = report.timed("decode", || decode_merged_sdf(&latent.slat, &config.dims, config.d))?;
    Ok(PipelineOutput {
        bbox,
        structure,
        latent,
        sdf,
    })
}

pub const SCENE_PLY: &str = "scene.ply";
pub const SDF_XLT: &str = "sdf.xlt";
pub const OCCUPANCY_XLT: &str = "occupancy.xlt";
pub const REPORT_JSON: &str = "report.json";
pub const LOSS_TRACE_CSV: &str = "loss_trace.csv";

/// Writes the exported assets of `output` into `out_dir`.
pub fn export_outputs(
    output: &PipelineOutput,
    config: &PipelineConfig,
    out_dir: &Path,
    report: &mut RunReport,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let ply = out_dir.join(SCENE_PLY);
    std::fs::write(&ply, export_slat(&output.latent.slat, config.dims.m, true).to_ascii())?;
    report.outputs.scene_ply = Some(ply);
    let sdf = out_dir.join(SDF_XLT);
    RawTensor::from(&output.sdf).write(&sdf)?;
    report.outputs.sdf_xlt = Some(sdf);
    let occ = out_dir.join(OCCUPANCY_XLT);
    RawTensor::from(&output.structure.grid).write(&occ)?;
    report.outputs.occupancy_xlt = Some(occ);
    if config.trace {
        let path = out_dir.join(LOSS_TRACE_CSV);
        let mut records = output.structure.losses.clone();
        // structured-latent records follow, tagged with round = n_iter
        records.extend(output.latent.losses.iter().map(|r| LossRecord {
            round: config.n_iter,
            ..*r
        }));
        std::fs::write(&path, trace_csv(&records))?;
        report.outputs.loss_trace_csv = Some(path);
    }
    Ok(())
}

/// Loads the prior, runs every stage and exports into `out_dir`. The report
/// is always written; on failure it holds the finished stages and the error.
pub fn extend3d(prior_path: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<RunReport> {
    let mut report = RunReport::default();
    let result = run_and_export(prior_path, config, out_dir, &mut report);
    if let Err(e) = &result {
        report.error = Some(e.to_string());
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(REPORT_JSON), report.to_json())?;
    result.map(|_| report)
}

fn run_and_export(prior_path: &Path, config: &PipelineConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let prior = report.timed("load", || load_scene_prior(prior_path))?;
    let runtime = Runtime::from_config(config).map_err(|e| e.in_stage("provider"))?;
    let output = run_pipeline(&prior, config, &runtime, report)?;
    let mut scratch = RunReport::default();
    let exported = report.timed("export", || export_outputs(&output, config, out_dir, &mut scratch));
    report.outputs = scratch.outputs;
    exported
}

pub const DEMO_PRIOR: &str = "prior.spr";
pub const DEMO_TARGET_OCCUPANCY: &str = "target_occupancy.xlt";
pub const DEMO_TARGET_FEATURES: &str = "target_features.xlt";
pub const DEMO_CONFIG: &str = "config.json";

/// Configuration of the self-contained oracle run: the occluded heightfield
/// scene, an exact oracle toward it read from `dir`, and the default
/// hyperparameters.
pub fn demo_config(dims: Dims, dir: &Path, seed: u64, workers: usize) -> PipelineConfig {
    PipelineConfig {
        dims,
        provider: ProviderSpec::BuiltinOracle {
            occupancy: dir.join(DEMO_TARGET_OCCUPANCY),
            features: Some(dir.join(DEMO_TARGET_FEATURES)),
            spread: 0.0,
        },
        seeds: Seeds {
            sdedit: seed,
            slat: seed.wrapping_add(1),
        },
        workers,
        normalization_box: Some(NormalizationBox::new([0.0; 3], [dims.a as f64, dims.b as f64, 1.0]).expect("unit box")),
        ..PipelineConfig::default()
    }
}

/// Writes the demo scene (prior, oracle targets, config) into `out_dir` and
/// runs the full pipeline on it.
pub fn oracle_demo(out_dir: &Path, dims: Dims, seed: u64, workers: usize) -> Result<RunReport> {
    let scene = occluded_scene(dims, seed).map_err(|e| e.in_stage("fixture"))?;
    std::fs::create_dir_all(out_dir)?;
    scene.prior.write(out_dir.join(DEMO_PRIOR))?;
    RawTensor::from(&scene.target).write(out_dir.join(DEMO_TARGET_OCCUPANCY))?;
    RawTensor::from(&scene.features).write(out_dir.join(DEMO_TARGET_FEATURES))?;
    let config = demo_config(dims, out_dir, seed, workers);
    std::fs::write(out_dir.join(DEMO_CONFIG), config.to_json())?;
    extend3d(&out_dir.join(DEMO_PRIOR), &config, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{recall, SceneFixture};
    use crate::flowcore::ZeroField;

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

    fn setup(dims: Dims, d: usize, seed: u64) -> (SceneFixture, PipelineConfig, Runtime) {
        let scene = occluded_scene(dims, seed).unwrap();
        let config = PipelineConfig {
            dims,
            d,
            k: 9,
            normalization_box: Some(scene.bbox),
            ..PipelineConfig::default()
        };
        let runtime = Runtime::new(Arc::new(scene.oracle(0.0).unwrap()), true, 2).unwrap();
        (scene, config, runtime)
    }

    #[test]
    fn oracle_sparse_structure_is_exact() {
        let (scene, mut config, runtime) = setup(small(), 2, 4);
        config.n_iter = 1;
        let ss = generate_sparse_structure(&scene.prior, &scene.bbox, &config, &runtime).unwrap();
        assert_eq!(ss.grid, scene.target);
        assert_eq!(ss.initial, scene.prior_voxels());
        assert_eq!(ss.counts, vec![scene.prior_voxels().count(), scene.target.count()]);
        assert!(!ss.losses.is_empty());
        assert_eq!(recall(&ss.grid, &scene.hidden()), 1.0);
    }

    #[test]
    fn zero_rounds_return_the_voxelized_prior() {
        let (scene, mut config, runtime) = setup(small(), 2, 5);
        config.n_iter = 0;
        let ss = generate_sparse_structure(&scene.prior, &scene.bbox, &config, &runtime).unwrap();
        assert_eq!(ss.grid, scene.prior_voxels());
        assert_eq!(ss.counts.len(), 1);
    }

    #[test]
    fn oracle_slat_reaches_target_features() {
        let dims = Dims { m: 16, ..small() };
        let (scene, mut config, runtime) = setup(dims, 2, 6);
        config.k = 25;
        let coords = scene.target.occupied_coords();
        let out = generate_slat(&coords, &scene.prior, &scene.bbox, &config, &runtime).unwrap();
        assert_eq!(out.slat.coords(), coords.as_slice());
        let err = out.slat.max_abs_diff(&scene.slat_target().unwrap()).unwrap();
        assert!(err <= 1e-4, "{err}");
        assert_eq!(out.losses.len(), config.k - 1);
    }

    #[test]
    fn slat_without_optimization_is_the_plain_flow() {
        let (scene, mut config, _) = setup(small(), 2, 7);
        config.slat_adam.steps = 0;
        let runtime = Runtime::new(Arc::new(ZeroField), false, 1).unwrap();
        let coords = scene.target.occupied_coords();
        let out = generate_slat(&coords, &scene.prior, &scene.bbox, &config, &runtime).unwrap();
        let noise = init_sparse_noise(&coords, config.dims.slat_extent(), 4, config.seeds.slat).unwrap();
        assert_eq!(out.slat, noise);
        assert!(out.losses.is_empty());
        assert!(generate_slat(&[], &scene.prior, &scene.bbox, &config, &runtime).is_err());
    }

    #[test]
    fn degenerate_single_patch_run() {
        let dims = Dims {
            a: 1,
            b: 1,
            n: 4,
            m: 8,
            c: 1,
            l: 4,
        };
        let (scene, mut config, runtime) = setup(dims, 1, 8);
        config.n_iter = 1;
        let mut report = RunReport::default();
        let out = run_pipeline(&scene.prior, &config, &runtime, &mut report).unwrap();
        assert_eq!(out.structure.grid, scene.target);
        assert_eq!(out.sdf.shape(), [8, 8, 8]);
        let names: Vec<_> = report.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(names, ["sparse_structure", "structured_latent", "decode"]);
    }

    #[test]
    fn conditioning_falls_back_to_global() {
        let scene = occluded_scene(small(), 9).unwrap();
        let grid = make_patch_grid(2, 1, 2, 4).unwrap();
        let c = build_conditioning(&scene.prior, &scene.bbox, &grid, false);
        assert_eq!(c.windows.len(), grid.len());
        assert!(c.windows.iter().all(|w| w.len() == crate::priors::TOY_CONDITION_LEN));
        let mut empty = scene.prior.clone();
        empty.valid.iter_mut().for_each(|v| *v = false);
        let c = build_conditioning(&empty, &scene.bbox, &grid, false);
        assert!(c.windows.iter().all(|w| *w == c.global));
    }

    #[test]
    fn demo_writes_outputs_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let report = oracle_demo(dir.path(), small(), 3, 1).unwrap();
        for name in [SCENE_PLY, SDF_XLT, OCCUPANCY_XLT, REPORT_JSON, DEMO_CONFIG] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        assert_eq!(report.stages.len(), 5);
        assert!(report.error.is_none());
        let loaded = PipelineConfig::load(dir.path().join(DEMO_CONFIG)).unwrap();
        assert_eq!(loaded.n_iter, 2);
    }

    #[test]
    fn failure_keeps_a_partial_report() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default();
        let err = extend3d(&dir.path().join("missing.spr"), &config, dir.path()).unwrap_err();
        assert!(!err.is_config());
        let text = std::fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap();
        assert!(text.contains("\"error\": \"load"), "{text}");
    }
}
