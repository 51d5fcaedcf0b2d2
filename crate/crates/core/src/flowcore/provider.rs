use crate::error::{Error, Result};
use crate::lattice::{DenseLatent, SparseLatent};
use crate::priors::ConditionEmbedding;

/// A latent patch handed to (or returned by) a vector-field provider. Dense
/// patches belong to the sparse-structure stage, sparse ones to the
/// structured-latent stage.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchLatent {
    Dense(DenseLatent),
    Sparse(SparseLatent),
}

impl PatchLatent {
    pub fn same_layout(&self, other: &PatchLatent) -> bool {
        match (self, other) {
            (PatchLatent::Dense(a), PatchLatent::Dense(b)) => a.shape() == b.shape(),
            (PatchLatent::Sparse(a), PatchLatent::Sparse(b)) => {
                a.extent() == b.extent() && a.width() == b.width() && a.coords() == b.coords()
            }
            _ => false,
        }
    }

    pub fn into_dense(self) -> Result<DenseLatent> {
        match self {
            PatchLatent::Dense(d) => Ok(d),
            PatchLatent::Sparse(_) => Err(Error::Protocol("expected a dense vector, got sparse".into())),
        }
    }

    pub fn into_sparse(self) -> Result<SparseLatent> {
        match self {
            PatchLatent::Sparse(s) => Ok(s),
            PatchLatent::Dense(_) => Err(Error::Protocol("expected a sparse vector, got dense".into())),
        }
    }
}

/// `v(Z, C, t)` on a single backbone-sized patch.
pub trait VectorFieldProvider: Send + Sync {
    /// Returns a vector with exactly the layout of `latent`.
    fn evaluate(&self, latent: &PatchLatent, condition: &ConditionEmbedding, t: f32) -> Result<PatchLatent>;

    /// Whether `evaluate` may be called from several workers at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Returns zero vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl VectorFieldProvider for ZeroField {
    fn evaluate(&self, latent: &PatchLatent, _: &ConditionEmbedding, _: f32) -> Result<PatchLatent> {
        Ok(match latent {
            PatchLatent::Dense(d) => PatchLatent::Dense(DenseLatent::zeros(d.shape())),
            PatchLatent::Sparse(s) => PatchLatent::Sparse(s.with_features(vec![0.0; s.features().len()])?),
        })
    }
}

const PLACEMENT_TAG: &[u8; 4] = b"PLC1";

/// Which global `(x, y)` column feeds each `(u, v)` column of a `K x K`
/// patch. Travels as a trailer on the condition bytes so that location-aware
/// providers (the oracles) can recover it, locally or over the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub k: u32,
    /// Row-major over `(u, v)`.
    pub columns: Vec<[u32; 2]>,
}

impl Placement {
    pub fn window(x0: usize, y0: usize, k: usize) -> Self {
        let mut columns = Vec::with_capacity(k * k);
        for u in 0..k {
            for v in 0..k {
                columns.push([(x0 + u) as u32, (y0 + v) as u32]);
            }
        }
        Placement { k: k as u32, columns }
    }

    pub fn column(&self, u: usize, v: usize) -> [u32; 2] {
        self.columns[u * self.k as usize + v]
    }

    /// `condition` followed by the column map, `K` and the `PLC1` tag.
    pub fn attach(&self, condition: &ConditionEmbedding) -> ConditionEmbedding {
        let mut bytes = condition.as_bytes().to_vec();
        bytes.reserve(self.columns.len() * 8 + 8);
        for [x, y] in &self.columns {
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&y.to_le_bytes());
        }
        bytes.extend_from_slice(&self.k.to_le_bytes());
        bytes.extend_from_slice(PLACEMENT_TAG);
        ConditionEmbedding::from_bytes(bytes)
    }

    pub fn detach(condition: &ConditionEmbedding) -> Option<Placement> {
        let bytes = condition.as_bytes();
        let n = bytes.len();
        if n < 8 || &bytes[n - 4..] != PLACEMENT_TAG {
            return None;
        }
        let k = u32::from_le_bytes(bytes[n - 8..n - 4].try_into().ok()?);
        let count = (k as usize).checked_mul(k as usize)?;
        let body = count.checked_mul(8)?;
        let start = (n - 8).checked_sub(body)?;
        let columns = bytes[start..n - 8]
            .chunks_exact(8)
            .map(|c| {
                [
                    u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                    u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                ]
            })
            .collect();
        Some(Placement { k, columns })
    }
}

/// Closed-form field whose flow carries any state onto `target` along a
/// straight line: `v(Z, t) = (Z - x̂) / t`.
///
/// With `spread = 0` the clean estimate `x̂` is the target itself. A positive
/// spread turns it into the exact posterior mean for data drawn from
/// `N(target, spread²)` per cell, i.e. a model biased toward the target that
/// still trusts its input in proportion to the noise level it assumes.
#[derive(Debug, Clone, Default)]
pub struct OracleField {
    ss_target: Option<DenseLatent>,
    slat_target: Option<SparseLatent>,
    spread: f64,
}

impl OracleField {
    pub fn new(ss_target: Option<DenseLatent>, slat_target: Option<SparseLatent>) -> Self {
        OracleField {
            ss_target,
            slat_target,
            spread: 0.0,
        }
    }

    pub fn with_spread(mut self, spread: f64) -> Self {
        self.spread = spread.max(0.0);
        self
    }

    pub fn ss_target(&self) -> Option<&DenseLatent> {
        self.ss_target.as_ref()
    }

    pub fn slat_target(&self) -> Option<&SparseLatent> {
        self.slat_target.as_ref()
    }

    #[inline]
    fn velocity(&self, z: f32, target: f32, t: f64) -> f32 {
        let (z, mu) = (z as f64, target as f64);
        let estimate = if self.spread == 0.0 {
            mu
        } else {
            let s2 = self.spread * self.spread;
            let keep = (1.0 - t) * s2 / ((1.0 - t) * (1.0 - t) * s2 + t * t);
            mu + keep * (z - (1.0 - t) * mu)
        };
        ((z - estimate) / t) as f32
    }

    /// Field over a full extended dense lattice (no placement needed).
    pub fn eval_global_dense(&self, z: &DenseLatent, t: f64) -> Result<DenseLatent> {
        let target = self.dense_target()?;
        check_time(t)?;
        if z.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "state {:?} vs target {:?}",
                z.shape(),
                target.shape()
            )));
        }
        let data = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| self.velocity(a, b, t))
            .collect();
        DenseLatent::from_vec(z.shape(), data)
    }

    /// Field over the global sparse latent; coordinates missing from the
    /// target are treated as zero features.
    pub fn eval_global_sparse(&self, z: &SparseLatent, t: f64) -> Result<SparseLatent> {
        let target = self.sparse_target()?;
        check_time(t)?;
        let width = z.width();
        let mut out = Vec::with_capacity(z.features().len());
        for (p, f) in z.iter() {
            let tf = target.find(p).map(|n| target.feature(n));
            for (c, &v) in f.iter().enumerate() {
                out.push(self.velocity(v, tf.map_or(0.0, |x| x[c]), t));
            }
        }
        debug_assert_eq!(out.len(), z.len() * width);
        z.with_features(out)
    }

    fn dense_target(&self) -> Result<&DenseLatent> {
        self.ss_target
            .as_ref()
            .ok_or_else(|| Error::Provider("oracle has no sparse-structure target".into()))
    }

    fn sparse_target(&self) -> Result<&SparseLatent> {
        self.slat_target
            .as_ref()
            .ok_or_else(|| Error::Provider("oracle has no structured-latent target".into()))
    }
}

fn check_time(t: f64) -> Result<()> {
    if t <= 0.0 || t > 1.0 || !t.is_finite() {
        return Err(Error::Singularity(t));
    }
    Ok(())
}

impl VectorFieldProvider for OracleField {
    fn evaluate(&self, latent: &PatchLatent, condition: &ConditionEmbedding, t: f32) -> Result<PatchLatent> {
        let t = t as f64;
        check_time(t)?;
        let placement = Placement::detach(condition)
            .ok_or_else(|| Error::Provider("oracle needs a placement trailer on the condition".into()))?;
        let k = placement.k as usize;
        match latent {
            PatchLatent::Dense(z) => {
                let target = self.dense_target()?;
                let [sx, sy, sz, c] = z.shape();
                let [tx, ty, tz, tc] = target.shape();
                if sx != k || sy != k || c != tc || sz > tz {
                    return Err(Error::Dimension(format!(
                        "patch {:?} incompatible with placement K={k} and target {:?}",
                        z.shape(),
                        target.shape()
                    )));
                }
                let mut out = DenseLatent::zeros(z.shape());
                for u in 0..k {
                    for v in 0..k {
                        let [x, y] = placement.column(u, v);
                        if x as usize >= tx || y as usize >= ty {
                            return Err(Error::Provider(format!("placement column ({x}, {y}) outside target")));
                        }
                        let tcol = &target.column(x as usize, y as usize)[..sz * c];
                        let zcol = z.column(u, v);
                        for ((o, &a), &b) in out.column_mut(u, v).iter_mut().zip(zcol).zip(tcol) {
                            *o = self.velocity(a, b, t);
                        }
                    }
                }
                Ok(PatchLatent::Dense(out))
            }
            PatchLatent::Sparse(z) => {
                let target = self.sparse_target()?;
                if target.width() != z.width() {
                    return Err(Error::Dimension("feature width differs from target".into()));
                }
                let mut out = Vec::with_capacity(z.features().len());
                let mut hint = 0;
                for (p, f) in z.iter() {
                    if p[0] as usize >= k || p[1] as usize >= k {
                        return Err(Error::Provider(format!("patch coordinate {p:?} outside placement")));
                    }
                    let [x, y] = placement.column(p[0] as usize, p[1] as usize);
                    let found = target.find_from(hint, [x, y, p[2]]);
                    if let Some(n) = found {
                        hint = n;
                    }
                    let tf = found.map(|n| target.feature(n));
                    for (c, &v) in f.iter().enumerate() {
                        out.push(self.velocity(v, tf.map_or(0.0, |x| x[c]), t));
                    }
                }
                Ok(PatchLatent::Sparse(z.with_features(out)?))
            }
        }
    }
}
