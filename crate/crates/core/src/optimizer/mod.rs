//! Adam, the differentiable guidance objectives, and the per-timestep
//! optimization of the applied vector.

mod ssim;

pub use ssim::{ssim, ssim_with_grad, FloatImage, SSIM_C1, SSIM_C2, SSIM_WINDOW};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{DenseLatent, SparseLatent};
use crate::structedit::ToyCodec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Adam steps per flow timestep; 0 disables optimization.
    pub steps: usize,
    /// Start every timestep from fresh moments.
    pub reset_state: bool,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 5,
            reset_state: true,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Parameter(format!("eps = {} must be positive", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        OptimState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update of `x` in place.
pub fn adam_step(x: &mut [f64], grad: &[f64], state: &mut OptimState, params: &AdamParams) -> Result<()> {
    if x.len() != grad.len() || x.len() != state.len() {
        return Err(Error::Dimension(format!(
            "adam: parameter {} / gradient {} / state {} lengths differ",
            x.len(),
            grad.len(),
            state.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Optimization(format!("non-finite gradient at index {i}")));
    }
    state.step += 1;
    let bc1 = 1.0 - params.beta1.powf(state.step as f64);
    let bc2 = 1.0 - params.beta2.powf(state.step as f64);
    for i in 0..x.len() {
        let g = grad[i];
        state.m[i] = params.beta1 * state.m[i] + (1.0 - params.beta1) * g;
        state.v[i] = params.beta2 * state.v[i] + (1.0 - params.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        x[i] -= params.lr * m_hat / (v_hat.sqrt() + params.eps);
    }
    Ok(())
}

/// A scalar loss over a flat parameter vector with an analytic gradient.
pub trait DifferentiableObjective {
    fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub x: Vec<f64>,
    /// Loss at the start and after every step.
    pub losses: Vec<f64>,
}

/// Runs `params.steps` Adam steps from `init` with fresh moments.
pub fn optimize_vector(init: Vec<f64>, objective: &dyn DifferentiableObjective, params: &AdamParams) -> Result<Optimized> {
    let mut state = OptimState::new(init.len());
    optimize_with_state(init, objective, params, &mut state)
}

/// Like [`optimize_vector`] but continues from `state`.
pub fn optimize_with_state(
    init: Vec<f64>,
    objective: &dyn DifferentiableObjective,
    params: &AdamParams,
    state: &mut OptimState,
) -> Result<Optimized> {
    params.validate()?;
    let mut x = init;
    let mut losses = Vec::with_capacity(params.steps + 1);
    let (mut loss, mut grad) = objective.evaluate(&x)?;
    for step in 0..=params.steps {
        if !loss.is_finite() {
            return Err(Error::Optimization(format!(
                "non-finite loss at step {step}; trace so far {losses:?}"
            )));
        }
        losses.push(loss);
        if step == params.steps {
            break;
        }
        adam_step(&mut x, &grad, state, params)?;
        (loss, grad) = objective.evaluate(&x)?;
    }
    Ok(Optimized { x, losses })
}

/// One line of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub round: usize,
    pub step: usize,
    pub t: f64,
    pub loss: f64,
}

pub fn trace_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("round,step,t,loss\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.round, r.step, r.t, r.loss);
    }
    out
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy pulling the decoded logits at prior points
/// positive. The parameter is the applied vector `v`; the decoded latent is
/// `z_t - t * v`. Points are a multiset, so dense regions weigh more.
#[derive(Debug, Clone)]
pub struct SsLoss {
    z_t: Vec<f64>,
    t: f64,
    channels: usize,
    // (block index, number of points in the block)
    blocks: Vec<(usize, usize)>,
    points: usize,
}

impl SsLoss {
    pub fn new(z_t: &DenseLatent, t: f64, points: &[[u32; 3]], codec: &ToyCodec) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Parameter("SS loss needs at least one prior point".into()));
        }
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Singularity(t));
        }
        let [sx, sy, sz, c] = z_t.shape();
        if c != codec.channels() {
            return Err(Error::Dimension(format!("latent has {c} channels, codec {}", codec.channels())));
        }
        let r = codec.ratio() as u32;
        let mut counts = std::collections::BTreeMap::new();
        for p in points {
            let b = [p[0] / r, p[1] / r, p[2] / r];
            if b[0] as usize >= sx || b[1] as usize >= sy || b[2] as usize >= sz {
                return Err(Error::Bounds {
                    coord: *p,
                    extent: [sx as u32 * r, sy as u32 * r, sz as u32 * r],
                });
            }
            let idx = (b[0] as usize * sy + b[1] as usize) * sz + b[2] as usize;
            *counts.entry(idx).or_insert(0usize) += 1;
        }
        Ok(SsLoss {
            z_t: z_t.data().iter().map(|&v| v as f64).collect(),
            t,
            channels: c,
            blocks: counts.into_iter().collect(),
            points: points.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.z_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_t.is_empty()
    }
}

impl DifferentiableObjective for SsLoss {
    fn evaluate(&self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        if v.len() != self.z_t.len() {
            return Err(Error::Dimension(format!("vector length {} vs {}", v.len(), self.z_t.len())));
        }
        let c = self.channels;
        let p = self.points as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; v.len()];
        for &(b, count) in &self.blocks {
            let logit = (b * c..(b + 1) * c)
                .map(|i| self.z_t[i] - self.t * v[i])
                .sum::<f64>()
                / c as f64;
            loss -= count as f64 * log_sigmoid(logit);
            // dL/dlogit = count * (sigmoid - 1) / P and dlogit/dv = -t / C
            let g = count as f64 * (1.0 - sigmoid(logit)) * self.t / (p * c as f64);
            grad[b * c..(b + 1) * c].iter_mut().for_each(|x| *x = g);
        }
        Ok((loss / p, grad))
    }
}

/// Orthographic mean over z of feature channels `0..3` for every `(x, y)`
/// column; rows are x. Empty columns are black.
pub fn projection_render(slat: &SparseLatent) -> FloatImage {
    let [ex, ey, _] = slat.extent();
    render_features(slat, slat.features().iter().map(|&v| v as f64).collect::<Vec<_>>().as_slice(), ex as usize, ey as usize)
}

fn column_counts(slat: &SparseLatent, ey: usize, pixels: usize) -> Vec<usize> {
    let mut count = vec![0usize; pixels];
    for c in slat.coords() {
        count[c[0] as usize * ey + c[1] as usize] += 1;
    }
    count
}

fn render_features(slat: &SparseLatent, features: &[f64], ex: usize, ey: usize) -> FloatImage {
    let width = slat.width();
    let used = width.min(3);
    let mut img = FloatImage::zeros(ex, ey, 3);
    let count = column_counts(slat, ey, ex * ey);
    for (n, c) in slat.coords().iter().enumerate() {
        let px = c[0] as usize * ey + c[1] as usize;
        let k = count[px] as f64;
        for ch in 0..used {
            img.data[px * 3 + ch] += features[n * width + ch] / k;
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub l2: f64,
    pub ssim: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights { l2: 1.0, ssim: 1.0 }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.ssim >= 0.0) {
            return Err(Error::Parameter(format!("objective weights must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Image-space objective for the structured latent:
/// `l2 * |render - target|^2 / HW - ssim * SSIM(render, target)`, with the
/// render taken of `z_t - t * v`.
#[derive(Debug, Clone)]
pub struct SlatObjective {
    z_t: SparseLatent,
    t: f64,
    target: FloatImage,
    weights: ObjectiveWeights,
    count: Vec<usize>,
}

impl SlatObjective {
    pub fn new(z_t: &SparseLatent, t: f64, target: &FloatImage, weights: ObjectiveWeights) -> Result<Self> {
        weights.validate()?;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Singularity(t));
        }
        let [ex, ey, _] = z_t.extent();
        if (target.height, target.width, target.channels) != (ex as usize, ey as usize, 3) {
            return Err(Error::Config(format!(
                "target image {}x{}x{} does not match the {ex}x{ey} top view",
                target.height, target.width, target.channels
            )));
        }
        Ok(SlatObjective {
            count: column_counts(z_t, ey as usize, (ex * ey) as usize),
            z_t: z_t.clone(),
            t,
            target: target.clone(),
            weights,
        })
    }

    pub fn render(&self, v: &[f64]) -> FloatImage {
        let x: Vec<f64> = self
            .z_t
            .features()
            .iter()
            .zip(v)
            .map(|(&z, &v)| z as f64 - self.t * v)
            .collect();
        render_features(&self.z_t, &x, self.target.height, self.target.width)
    }
}

impl DifferentiableObjective for SlatObjective {
    fn evaluate(&self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        if v.len() != self.z_t.features().len() {
            return Err(Error::Dimension(format!(
                "vector length {} vs {}",
                v.len(),
                self.z_t.features().len()
            )));
        }
        let img = self.render(v);
        let hw = (img.height * img.width) as f64;
        let mut d_img = vec![0.0; img.data.len()];
        let mut loss = 0.0;
        if self.weights.l2 > 0.0 {
            for (i, (&a, &b)) in img.data.iter().zip(&self.target.data).enumerate() {
                loss += self.weights.l2 * (a - b) * (a - b) / hw;
                d_img[i] += self.weights.l2 * 2.0 * (a - b) / hw;
            }
        }
        if self.weights.ssim > 0.0 {
            let (s, g) = ssim_with_grad(&img, &self.target)?;
            loss -= self.weights.ssim * s;
            for (d, g) in d_img.iter_mut().zip(g) {
                *d -= self.weights.ssim * g;
            }
        }
        let width = self.z_t.width();
        let ey = self.target.width;
        let mut grad = vec![0.0; v.len()];
        for (n, c) in self.z_t.coords().iter().enumerate() {
            let px = c[0] as usize * ey + c[1] as usize;
            let k = self.count[px] as f64;
            for ch in 0..width.min(3) {
                grad[n * width + ch] = -self.t * d_img[px * 3 + ch] / k;
            }
        }
        Ok((loss, grad))
    }
}

pub fn dense_to_f64(z: &DenseLatent) -> Vec<f64> {
    z.data().iter().map(|&v| v as f64).collect()
}

pub fn sparse_to_f64(z: &SparseLatent) -> Vec<f64> {
    z.features().iter().map(|&v| v as f64).collect()
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Quadratic {
        center: Vec<f64>,
    }

    impl DifferentiableObjective for Quadratic {
        fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            let mut loss = 0.0;
            let mut g = Vec::with_capacity(x.len());
            for (n, (&xi, &ci)) in x.iter().zip(&self.center).enumerate() {
                let w = 1.0 + n as f64;
                loss += w * (xi - ci) * (xi - ci);
                g.push(2.0 * w * (xi - ci));
            }
            Ok((loss, g))
        }
    }

    struct Flat;

    impl DifferentiableObjective for Flat {
        fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((3.0, vec![0.0; x.len()]))
        }
    }

    #[test]
    fn adam_zero_gradient() {
        let mut x = vec![1.0, -2.0];
        let mut st = OptimState::new(2);
        adam_step(&mut x, &[0.0, 0.0], &mut st, &AdamParams::default()).unwrap();
        assert_eq!(x, vec![1.0, -2.0]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn adam_first_step() {
        let mut x = vec![0.0];
        let mut st = OptimState::new(1);
        adam_step(&mut x, &[0.5], &mut st, &AdamParams::default()).unwrap();
        let expected = -0.01 * 0.5 / (0.5 + 1e-8);
        assert!((x[0] - expected).abs() < 1e-15);
        assert!((x[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_second_step_not_larger() {
        let p = AdamParams::default();
        let mut x = vec![0.0];
        let mut st = OptimState::new(1);
        adam_step(&mut x, &[0.3], &mut st, &p).unwrap();
        let d1 = x[0];
        adam_step(&mut x, &[0.3], &mut st, &p).unwrap();
        let d2 = x[0] - d1;
        assert!(d2.abs() <= d1.abs() * 1.01);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut st = OptimState::new(1);
        let mut x = vec![0.0];
        assert!(matches!(
            adam_step(&mut x, &[f64::NAN], &mut st, &AdamParams::default()),
            Err(Error::Optimization(_))
        ));
        assert!(adam_step(&mut x, &[0.0, 1.0], &mut st, &AdamParams::default()).is_err());
    }

    #[test]
    fn optimize_zero_steps_and_flat() {
        let q = Quadratic { center: vec![1.0, 2.0] };
        let p = AdamParams {
            steps: 0,
            ..AdamParams::default()
        };
        let r = optimize_vector(vec![0.5, 0.5], &q, &p).unwrap();
        assert_eq!(r.x, vec![0.5, 0.5]);
        assert_eq!(r.losses.len(), 1);
        let r = optimize_vector(vec![0.5, 0.5], &Flat, &AdamParams::default()).unwrap();
        assert_eq!(r.x, vec![0.5, 0.5]);
    }

    #[test]
    fn quadratic_loss_decreases_each_step() {
        let q = Quadratic {
            center: vec![1.0, -1.0, 0.3, 2.0],
        };
        let p = AdamParams {
            steps: 50,
            ..AdamParams::default()
        };
        let r = optimize_vector(vec![0.0; 4], &q, &p).unwrap();
        assert_eq!(r.losses.len(), 51);
        assert!(r.losses.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(log_sigmoid(1000.0), 0.0);
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-9);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn ss_loss_single_zero_logit() {
        let codec = ToyCodec::new(2, 1).unwrap();
        let z = DenseLatent::zeros([2, 2, 2, 1]);
        let l = SsLoss::new(&z, 0.5, &[[1, 1, 1]], &codec).unwrap();
        let (loss, _) = l.evaluate(&[0.0; 8]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6);
        let big = DenseLatent::filled([2, 2, 2, 1], 100.0);
        let l = SsLoss::new(&big, 0.5, &[[1, 1, 1], [3, 3, 3]], &codec).unwrap();
        assert!(l.evaluate(&[0.0; 8]).unwrap().0 < 1e-40);
        assert!(SsLoss::new(&z, 0.5, &[], &codec).is_err());
    }

    fn central_difference(obj: &dyn DifferentiableObjective, x: &[f64], i: usize, h: f64) -> f64 {
        let mut p = x.to_vec();
        p[i] += h;
        let mut m = x.to_vec();
        m[i] -= h;
        (obj.value(&p).unwrap() - obj.value(&m).unwrap()) / (2.0 * h)
    }

    #[test]
    fn ss_loss_gradient_and_sparsity() {
        let codec = ToyCodec::new(2, 2).unwrap();
        let z = DenseLatent::gaussian([2, 2, 2, 2], 3);
        let points = [[0, 0, 0], [1, 1, 1], [3, 2, 0], [3, 2, 1]];
        let l = SsLoss::new(&z, 0.7, &points, &codec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
        let (_, g) = l.evaluate(&v).unwrap();
        for i in 0..16 {
            let fd = central_difference(&l, &v, i, 1e-6);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "{i}: {fd} vs {}", g[i]);
        }
        // only blocks (0,0,0) and (1,1,0) carry points
        let touched: Vec<usize> = (0..16).filter(|&i| g[i] != 0.0).collect();
        assert_eq!(touched, vec![0, 1, 12, 13]);
    }

    #[test]
    fn render_cases() {
        let empty = SparseLatent::empty([2, 3, 4], 4);
        assert!(projection_render(&empty).data.iter().all(|&v| v == 0.0));
        let one = SparseLatent::from_entries([2, 3, 4], 4, vec![([1, 2, 3], vec![1.0, 0.0, 0.0, 9.0])]).unwrap();
        let img = projection_render(&one);
        assert_eq!(img.at(1, 2, 0), 1.0);
        assert_eq!(img.data.iter().filter(|&&v| v != 0.0).count(), 1);
        let two = SparseLatent::from_entries(
            [2, 3, 4],
            4,
            vec![([0, 1, 0], vec![0.2, 0.4, 0.6, 0.0]), ([0, 1, 3], vec![0.6, 0.0, 0.2, 5.0])],
        )
        .unwrap();
        let img = projection_render(&two);
        for (ch, want) in [0.4, 0.2, 0.4].into_iter().enumerate() {
            assert!((img.at(0, 1, ch) - want).abs() < 1e-7);
        }
    }

    fn random_slat(seed: u64, entries: usize) -> SparseLatent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut list = Vec::new();
        while list.len() < entries {
            let c = [rng.random_range(0..4u32), rng.random_range(0..4u32), rng.random_range(0..4u32)];
            if list.iter().any(|(p, _)| *p == c) {
                continue;
            }
            list.push((c, (0..4).map(|_| rng.random::<f32>()).collect()));
        }
        SparseLatent::from_entries([4, 4, 4], 4, list).unwrap()
    }

    #[test]
    fn slat_objective_at_target_is_flat_without_ssim() {
        let z = random_slat(1, 6);
        let target = projection_render(&z);
        let w = ObjectiveWeights { l2: 1.0, ssim: 0.0 };
        let o = SlatObjective::new(&z, 0.5, &target, w).unwrap();
        let (loss, g) = o.evaluate(&[0.0; 24]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn slat_objective_single_pixel_difference() {
        let z = SparseLatent::from_entries([4, 4, 4], 4, vec![([2, 1, 0], vec![0.5, 0.5, 0.5, 0.0])]).unwrap();
        let mut target = projection_render(&z);
        target.data[(2 * 4 + 1) * 3] += 0.25;
        let o = SlatObjective::new(&z, 0.5, &target, ObjectiveWeights { l2: 1.0, ssim: 0.0 }).unwrap();
        let loss = o.value(&[0.0; 4]).unwrap();
        assert!((loss - 0.25 * 0.25 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn slat_objective_gradient() {
        let z = random_slat(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..48).map(|_| rng.random::<f64>()).collect();
        let target = FloatImage::from_vec(4, 4, 3, data).unwrap();
        let o = SlatObjective::new(&z, 0.6, &target, ObjectiveWeights::default()).unwrap();
        let v: Vec<f64> = (0..24).map(|_| rng.random::<f64>() - 0.5).collect();
        let (_, g) = o.evaluate(&v).unwrap();
        for i in 0..24 {
            let fd = central_difference(&o, &v, i, 1e-6);
            assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-6), "{i}: {fd} vs {}", g[i]);
        }
        // the fourth channel is not rendered
        assert!(g.iter().skip(3).step_by(4).all(|&x| x == 0.0));
    }

    #[test]
    fn slat_objective_checks_target_shape() {
        let z = random_slat(2, 3);
        let bad = FloatImage::zeros(3, 4, 3);
        assert!(matches!(
            SlatObjective::new(&z, 0.5, &bad, ObjectiveWeights::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_trace_format() {
        let csv = trace_csv(&[LossRecord {
            round: 0,
            step: 3,
            t: 0.5,
            loss: 1.25,
        }]);
        assert_eq!(csv, "round,step,t,loss\n0,3,0.5,1.25\n");
    }
}
