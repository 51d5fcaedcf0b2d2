//! Structural similarity with uniform square windows and its exact
//! gradient with respect to the first image.

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Channels-last floating-point image, `data[(row * width + col) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FloatImage {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FloatImage {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, c: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + c]
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::Dimension(format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        if self.data.is_empty() {
            return Err(Error::Dimension("SSIM of an empty image".into()));
        }
        Ok(())
    }
}

impl From<&crate::priors::Image> for FloatImage {
    fn from(img: &crate::priors::Image) -> Self {
        FloatImage {
            height: img.height(),
            width: img.width(),
            channels: 3,
            data: img.to_f64(),
        }
    }
}

struct WindowStats {
    s: f64,
    // d S / d mu_a, d S / d var_a, d S / d cov
    d_mu: f64,
    d_var: f64,
    d_cov: f64,
    mu_a: f64,
    mu_b: f64,
}

fn window_stats(sums: &[f64; 5], n: f64) -> WindowStats {
    let [sa, sb, saa, sbb, sab] = *sums;
    let (mu_a, mu_b) = (sa / n, sb / n);
    let var_a = saa / n - mu_a * mu_a;
    let var_b = sbb / n - mu_b * mu_b;
    let cov = sab / n - mu_a * mu_b;
    let num1 = 2.0 * mu_a * mu_b + SSIM_C1;
    let num2 = 2.0 * cov + SSIM_C2;
    let den1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
    let den2 = var_a + var_b + SSIM_C2;
    let s = num1 * num2 / (den1 * den2);
    WindowStats {
        s,
        d_mu: s * (2.0 * mu_b / num1 - 2.0 * mu_a / den1),
        d_var: -s / den2,
        d_cov: 2.0 * s / num2,
        mu_a,
        mu_b,
    }
}

/// Summed-area table with a zero border: `at(r, c)` is the sum over
/// `[0, r) x [0, c)`.
struct Integral {
    cols: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let stride = cols + 1;
        let mut data = vec![0.0; (rows + 1) * stride];
        for r in 0..rows {
            let mut run = 0.0;
            for c in 0..cols {
                run += f(r, c);
                data[(r + 1) * stride + c + 1] = data[r * stride + c + 1] + run;
            }
        }
        Integral { cols, data }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * (self.cols + 1) + c]
    }

    /// Sum over rows `r0..r1` and columns `c0..c1`.
    #[inline]
    fn sum(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        self.at(r1, c1) - self.at(r0, c1) - self.at(r1, c0) + self.at(r0, c0)
    }
}

fn window_side(img: &FloatImage) -> usize {
    SSIM_WINDOW.min(img.height).min(img.width)
}

/// Mean SSIM over all valid window positions and channels.
pub fn ssim(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &FloatImage, b: &FloatImage) -> Result<(f64, Vec<f64>)> {
    ssim_impl(a, b, true)
}

fn ssim_impl(a: &FloatImage, b: &FloatImage, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    a.same_shape(b)?;
    let w = window_side(a);
    let (h, wd) = (a.height, a.width);
    let (rows, cols) = (h - w + 1, wd - w + 1);
    let count = (rows * cols * a.channels) as f64;
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; a.data.len()] } else { Vec::new() };
    let mut coef = if want_grad { vec![[0.0f64; 3]; rows * cols] } else { Vec::new() };
    for ch in 0..a.channels {
        let (pa, pb) = (|r: usize, c: usize| a.at(r, c, ch), |r: usize, c: usize| b.at(r, c, ch));
        let tables = [
            Integral::new(h, wd, pa),
            Integral::new(h, wd, pb),
            Integral::new(h, wd, |r, c| pa(r, c) * pa(r, c)),
            Integral::new(h, wd, |r, c| pb(r, c) * pb(r, c)),
            Integral::new(h, wd, |r, c| pa(r, c) * pb(r, c)),
        ];
        for r0 in 0..rows {
            for c0 in 0..cols {
                let sums = tables.each_ref().map(|t| t.sum(r0, r0 + w, c0, c0 + w));
                let st = window_stats(&sums, n);
                total += st.s;
                if want_grad {
                    // dS/dA_p = alpha + beta * A_p + gamma * B_p for p in the window
                    coef[r0 * cols + c0] = [
                        (st.d_mu - 2.0 * st.d_var * st.mu_a - st.d_cov * st.mu_b) / n,
                        2.0 * st.d_var / n,
                        st.d_cov / n,
                    ];
                }
            }
        }
        if !want_grad {
            continue;
        }
        // each pixel collects the coefficients of every window covering it
        let acc = [0, 1, 2].map(|k| Integral::new(rows, cols, |r, c| coef[r * cols + c][k]));
        for r in 0..h {
            let (r0, r1) = (r.saturating_sub(w - 1), (r + 1).min(rows));
            for c in 0..wd {
                let (c0, c1) = (c.saturating_sub(w - 1), (c + 1).min(cols));
                let [al, be, ga] = acc.each_ref().map(|t| t.sum(r0, r1, c0, c1));
                let i = (r * wd + c) * a.channels + ch;
                grad[i] = (al + be * a.data[i] + ga * b.data[i]) / count;
            }
        }
    }
    Ok((total / count, grad))
}
