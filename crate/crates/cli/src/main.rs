use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use patchflow::bridge::{serve_provider, Endpoint};
use patchflow::lattice::{Dims, RawTensor};
use patchflow::pipeline::{extend3d, load_oracle, oracle_demo, PipelineConfig, RunReport};
use patchflow::ply::PointCloud;
use patchflow::priors::{voxelize, NormalizationBox};

#[derive(Parser)]
#[command(name = "patchflow", version, about = "Wide 3D scene generation with patch-wise flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a scene prior.
    Generate {
        prior: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the worker count from the config.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Voxelize a PLY point cloud onto the extended occupancy lattice.
    Voxelize {
        cloud: PathBuf,
        /// Lattice as `a,b,N,M`.
        #[arg(long, default_value = "2,2,8,32")]
        dims: String,
        #[arg(long)]
        out: PathBuf,
        /// Relative margin of the fitted normalization box.
        #[arg(long, default_value_t = 0.02)]
        margin: f64,
    },
    /// Print the shape and value statistics of an XLT1 tensor.
    Inspect { file: PathBuf },
    /// Serve an oracle field toward a target over XFP1.
    ServeOracle {
        /// Target occupancy on the extended lattice.
        #[arg(long)]
        target: PathBuf,
        /// Dense target features `(aM, bM, M, l)`.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value = "2,2,8,32")]
        dims: String,
        #[arg(long, default_value_t = 0.0)]
        spread: f64,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Generate the built-in occluded scene and reconstruct it with an
    /// exact oracle.
    OracleDemo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "oracle-demo")]
        out: PathBuf,
        #[arg(long, default_value = "2,2,8,32")]
        dims: String,
    },
}

/// Failures caused by user input rather than by the run itself.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn lift(e: patchflow::Error) -> anyhow::Error {
    if e.is_config() {
        ConfigError(e.to_string()).into()
    } else {
        e.into()
    }
}

fn parse_dims(text: &str) -> anyhow::Result<Dims> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| ConfigError(format!("bad --dims {text:?}: {e}")))?;
    let [a, b, n, m] = parts[..] else {
        return Err(ConfigError(format!("--dims needs a,b,N,M, got {text:?}")).into());
    };
    let dims = Dims {
        a,
        b,
        n,
        m,
        ..Dims::default()
    };
    dims.validate().map_err(lift)?;
    Ok(dims)
}

fn print_report(report: &RunReport) {
    for s in &report.stages {
        println!("{:<18} {:>9.3} s", s.stage, s.seconds);
    }
    println!("occupied per round: {:?}", report.round_counts);
    println!("structured latent entries: {}", report.slat_entries);
}

fn generate(prior: &Path, config: &Path, out: &Path, workers: Option<usize>) -> anyhow::Result<()> {
    let mut config = PipelineConfig::load(config).map_err(lift)?;
    if let Some(w) = workers {
        config.workers = w;
        config.validate().map_err(lift)?;
    }
    let report = extend3d(prior, &config, out).map_err(lift)?;
    print_report(&report);
    println!("wrote {}", out.display());
    Ok(())
}

fn voxelize_cloud(cloud: &Path, dims: &str, out: &Path, margin: f64) -> anyhow::Result<()> {
    let dims = parse_dims(dims)?;
    let cloud = PointCloud::read(cloud).map_err(lift)?;
    let bbox = NormalizationBox::fit(&cloud.points, margin).map_err(lift)?;
    let v = voxelize(&cloud.points, &bbox, dims.occupancy_shape());
    RawTensor::from(&v.grid).write(out).map_err(lift)?;
    println!(
        "{} points -> {} occupied voxels of {:?} ({} clamped)",
        cloud.points.len(),
        v.grid.count(),
        dims.occupancy_shape(),
        v.clamped
    );
    Ok(())
}

fn inspect(file: &Path) -> anyhow::Result<()> {
    let t = RawTensor::read(file).map_err(lift)?;
    println!("shape    {:?}", t.shape);
    println!("elements {}", t.data.len());
    if t.data.is_empty() {
        return Ok(());
    }
    let (mut lo, mut hi, mut sum, mut nonzero, mut finite) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64, 0, 0);
    for &v in &t.data {
        if !v.is_finite() {
            continue;
        }
        finite += 1;
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v as f64;
        nonzero += (v != 0.0) as usize;
    }
    println!("min      {lo}");
    println!("max      {hi}");
    println!("mean     {}", sum / finite.max(1) as f64);
    println!("nonzero  {nonzero}");
    if finite < t.data.len() {
        println!("nonfinite {}", t.data.len() - finite);
    }
    Ok(())
}

fn serve(target: &Path, features: Option<&Path>, dims: &str, spread: f64, listen: &str) -> anyhow::Result<()> {
    let dims = parse_dims(dims)?;
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(ConfigError(format!("--spread {spread} must be >= 0")).into());
    }
    let endpoint: Endpoint = listen.parse().map_err(lift)?;
    let oracle = load_oracle(&dims, target, features, spread).map_err(lift)?;
    println!("serving oracle on {endpoint}");
    serve_provider(Arc::new(oracle), &endpoint).map_err(lift)?;
    Ok(())
}

fn demo(seed: u64, workers: usize, out: &Path, dims: &str) -> anyhow::Result<()> {
    let dims = parse_dims(dims)?;
    if workers == 0 {
        bail!(ConfigError("--workers must be >= 1".into()));
    }
    let report = oracle_demo(out, dims, seed, workers)
        .map_err(lift)
        .with_context(|| format!("oracle demo in {}", out.display()))?;
    print_report(&report);
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            prior,
            config,
            out,
            workers,
        } => generate(&prior, &config, &out, workers),
        Command::Voxelize {
            cloud,
            dims,
            out,
            margin,
        } => voxelize_cloud(&cloud, &dims, &out, margin),
        Command::Inspect { file } => inspect(&file),
        Command::ServeOracle {
            target,
            features,
            dims,
            spread,
            listen,
        } => serve(&target, features.as_deref(), &dims, spread, &listen),
        Command::OracleDemo {
            seed,
            workers,
            out,
            dims,
        } => demo(seed, workers, &out, &dims),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
