//! JSON run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bridge::{Endpoint, RemoteProvider};
use crate::error::{Error, Result};
use crate::flowcore::{OracleField, VectorFieldProvider, ZeroField};
use crate::lattice::{DenseLatent, Dims, OccupancyGrid, RawTensor, SparseLatent};
use crate::optimizer::{AdamParams, ObjectiveWeights};
use crate::priors::NormalizationBox;
use crate::structedit::{SdeditParams, ToyCodec};

/// Where patch vectors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProviderSpec {
    /// Always returns zero vectors.
    #[default]
    Zero,
    /// Closed-form field toward a target read from XLT1 files: an occupancy
    /// grid `(aM, bM, M)` and optionally dense features `(aM, bM, M, l)`.
    BuiltinOracle {
        occupancy: PathBuf,
        #[serde(default)]
        features: Option<PathBuf>,
        #[serde(default)]
        spread: f64,
    },
    /// A server speaking the XFP1 protocol.
    Remote {
        endpoint: String,
        #[serde(default)]
        timeout_secs: Option<f64>,
        /// Append patch placement to conditions (needed by oracle servers).
        #[serde(default = "yes")]
        placement: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub sdedit: u64,
    pub slat: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { sdedit: 0, slat: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dims: Dims,
    /// Division factor: window stride is `K / d`.
    pub d: usize,
    pub t_start: f64,
    pub t_noise: f64,
    pub n_iter: usize,
    /// Permit `t_noise > t_start`; for ablations only.
    pub allow_over_noise: bool,
    /// Schedule length (number of time points) of each flow.
    pub k: usize,
    /// Exponent of the dilated-sampling weight.
    pub alpha: f64,
    pub dilated_enabled: bool,
    pub ss_adam: AdamParams,
    pub slat_adam: AdamParams,
    /// Optimize in every SDEdit round rather than only the last.
    pub optimize_every_round: bool,
    pub weights: ObjectiveWeights,
    pub provider: ProviderSpec,
    pub seeds: Seeds,
    pub workers: usize,
    /// Fixed world box; fitted to the prior points when absent.
    pub normalization_box: Option<NormalizationBox>,
    /// Write per-timestep loss traces as CSV next to the outputs.
    pub trace: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sd = SdeditParams::default();
        PipelineConfig {
            dims: Dims::default(),
            d: 4,
            t_start: sd.t_start,
            t_noise: sd.t_noise,
            n_iter: sd.n_iter,
            allow_over_noise: false,
            k: 25,
            alpha: 5.0,
            dilated_enabled: true,
            ss_adam: AdamParams::default(),
            slat_adam: AdamParams::default(),
            optimize_every_round: true,
            weights: ObjectiveWeights::default(),
            provider: ProviderSpec::Zero,
            seeds: Seeds::default(),
            workers: 1,
            normalization_box: None,
            trace: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::from_json(&text)?;
        c.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(c)
    }

    /// Makes provider file paths relative to `base` absolute.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let ProviderSpec::BuiltinOracle { occupancy, features, .. } = &mut self.provider {
            if occupancy.is_relative() {
                *occupancy = base.join(&*occupancy);
            }
            if let Some(f) = features {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn sdedit(&self) -> SdeditParams {
        SdeditParams {
            t_start: self.t_start,
            t_noise: self.t_noise,
            n_iter: self.n_iter,
            allow_over_noise: self.allow_over_noise,
        }
    }

    pub fn codec(&self) -> Result<ToyCodec> {
        ToyCodec::new(self.dims.ratio(), self.dims.c)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.d == 0 || !self.dims.n.is_multiple_of(self.d) || !self.dims.m.is_multiple_of(self.d) {
            return Err(Error::Config(format!(
                "d = {} must divide N = {} and M = {}",
                self.d, self.dims.n, self.dims.m
            )));
        }
        self.sdedit().validate()?;
        if self.k < 2 {
            return Err(Error::Config(format!("schedule length k = {} must be >= 2", self.k)));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha = {} must be finite and >= 0", self.alpha)));
        }
        self.ss_adam.validate()?;
        self.slat_adam.validate()?;
        self.weights.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if let Some(b) = &self.normalization_box {
            b.validate()?;
        }
        match &self.provider {
            ProviderSpec::BuiltinOracle { spread, .. } if !(spread.is_finite() && *spread >= 0.0) => {
                return Err(Error::Config(format!("oracle spread {spread} must be >= 0")));
            }
            ProviderSpec::Remote { endpoint, timeout_secs, .. } => {
                endpoint.parse::<Endpoint>()?;
                if let Some(t) = timeout_secs {
                    if !(t.is_finite() && *t > 0.0) {
                        return Err(Error::Config(format!("timeout {t} must be positive")));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Instantiates the provider and reports whether conditions must carry
    /// patch placement.
    pub fn build_provider(&self) -> Result<(Arc<dyn VectorFieldProvider>, bool)> {
        match &self.provider {
            ProviderSpec::Zero => Ok((Arc::new(ZeroField), false)),
            ProviderSpec::BuiltinOracle {
                occupancy,
                features,
                spread,
            } => {
                let oracle = load_oracle(&self.dims, occupancy, features.as_deref(), *spread)?;
                Ok((Arc::new(oracle), true))
            }
            ProviderSpec::Remote {
                endpoint,
                timeout_secs,
                placement,
            } => {
                let ep: Endpoint = endpoint.parse()?;
                let mut remote = RemoteProvider::connect(&ep)?;
                if let Some(t) = timeout_secs {
                    remote = remote.with_timeout(Duration::from_secs_f64(*t));
                }
                Ok((Arc::new(remote), *placement))
            }
        }
    }
}

/// Builds an oracle from XLT1 target files on the extended lattice.
pub fn load_oracle(dims: &Dims, occupancy: &Path, features: Option<&Path>, spread: f64) -> Result<OracleField> {
    let occ = OccupancyGrid::try_from(RawTensor::read(occupancy)?)?;
    if occ.shape() != dims.occupancy_shape() {
        return Err(Error::Config(format!(
            "oracle occupancy has shape {:?}, expected {:?}",
            occ.shape(),
            dims.occupancy_shape()
        )));
    }
    let codec = ToyCodec::new(dims.ratio(), dims.c)?;
    let ss = codec.encode(&occ)?;
    let slat = match features {
        Some(p) => {
            let f = DenseLatent::try_from(RawTensor::read(p)?)?;
            let [ex, ey, ez] = dims.occupancy_shape();
            if f.shape() != [ex, ey, ez, dims.l] {
                return Err(Error::Config(format!(
                    "oracle features have shape {:?}, expected {:?}",
                    f.shape(),
                    [ex, ey, ez, dims.l]
                )));
            }
            Some(sparse_from_dense(&f, &occ)?)
        }
        None => None,
    };
    Ok(OracleField::new(Some(ss), slat).with_spread(spread))
}

/// Entries of `features` at the occupied cells of `occupancy`.
pub fn sparse_from_dense(features: &DenseLatent, occupancy: &OccupancyGrid) -> Result<SparseLatent> {
    let [ex, ey, ez, l] = features.shape();
    let coords = occupancy.occupied_coords();
    let mut data = Vec::with_capacity(coords.len() * l);
    for c in &coords {
        let z = c[2] as usize;
        data.extend_from_slice(&features.column(c[0] as usize, c[1] as usize)[z * l..(z + 1) * l]);
    }
    SparseLatent::from_parts([ex as u32, ey as u32, ez as u32], l, coords, data)
}
