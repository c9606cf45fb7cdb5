//! Full-reference (PSNR, SSIM) and no-reference (visible-edge gradient ratio,
//! saturation percentage, contrast gain) image quality measures.
//!
//! All inputs are `[0, 1]` RGB images. Structural and gradient measures work
//! on BT.601 luminance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize, Image, Plane};

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Guard against division by flat input gradients in [`gradient_ratio_r`].
pub const GRADIENT_EPS: f64 = 1e-6;
/// Floor on local mean luminance in [`contrast_gain_c`].
pub const CONTRAST_MEAN_FLOOR: f64 = 0.01;
pub const CONTRAST_WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    /// Sobel magnitude above which a pixel counts as a visible edge.
    pub edge_threshold: f32,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self { edge_threshold: 0.02 }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge_threshold.is_finite() && self.edge_threshold >= 0.0) {
            return Err(Error::invalid(format!("edge threshold must be >= 0, got {}", self.edge_threshold)));
        }
        Ok(())
    }
}

/// `10 log10(1 / MSE)` over all pixels and channels, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(reference: &Image, candidate: &Image) -> Result<f64> {
    reference.same_dims(candidate)?;
    let mut sum = Summation::default();
    for (&a, &b) in reference.data().iter().zip(candidate.data()) {
        let d = a as f64 - b as f64;
        sum.add(d * d);
    }
    let mse = sum.total() / reference.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sum over every fully contained window position.
fn filter_valid(data: &[f64], width: usize, height: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let (wo, ho) = (width - k + 1, height - k + 1);
    let mut rows = vec![0f64; wo * height];
    for y in 0..height {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| kernel[i] * data[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0f64; wo * ho];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| kernel[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, wo, ho)
}

/// Mean structural similarity of the luminance channels, Gaussian window
/// 11×11 (σ = 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over all
/// window positions that fit inside the image.
pub fn ssim(reference: &Image, candidate: &Image) -> Result<f64> {
    reference.same_dims(candidate)?;
    let (w, h) = reference.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let x: Vec<f64> = reference.luminance().data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = candidate.luminance().data().iter().map(|&v| v as f64).collect();
    let kernel = gaussian_window();
    let products = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let (mx, wo, ho) = filter_valid(&x, w, h, &kernel);
    let (my, _, _) = filter_valid(&y, w, h, &kernel);
    let (mxx, _, _) = filter_valid(&products(&|i| x[i] * x[i]), w, h, &kernel);
    let (myy, _, _) = filter_valid(&products(&|i| y[i] * y[i]), w, h, &kernel);
    let (mxy, _, _) = filter_valid(&products(&|i| x[i] * y[i]), w, h, &kernel);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut sum = Summation::default();
    for i in 0..wo * ho {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        sum.add(((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2)));
    }
    Ok((sum.total() / (wo * ho) as f64).clamp(-1.0, 1.0))
}

/// Luminance gradient magnitudes and the pixels whose magnitude exceeds the
/// visibility threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub magnitude: Vec<f32>,
}

impl EdgeMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Sobel gradient magnitude with edge-replicated borders. The kernels are
/// the classic 3×3 Sobel pair scaled by 1/2, so a ramp of slope `s` per
/// pixel responds with magnitude `4 s`.
pub fn sobel_magnitude(plane: &Plane) -> Plane {
    let (w, h) = plane.dims();
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        plane.get(xc, yc)
    };
    Plane::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
        let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        0.5 * (gx * gx + gy * gy).sqrt()
    })
}

pub fn visible_edges(image: &Image, threshold: f32) -> EdgeMask {
    let mag = sobel_magnitude(&image.luminance());
    EdgeMask {
        width: mag.width(),
        height: mag.height(),
        mask: mag.data().iter().map(|&m| m > threshold).collect(),
        magnitude: mag.data().to_vec(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientRatio {
    pub value: f64,
    /// Set when the output had no visible edges and `value` defaulted to 1.
    pub empty_mask: bool,
}

/// Geometric mean, over the output's visible edges, of output-to-input
/// gradient magnitude ratios.
pub fn gradient_ratio_r(hazy: &Image, output: &Image, params: &MetricParams) -> Result<GradientRatio> {
    hazy.same_dims(output)?;
    let edges = visible_edges(output, params.edge_threshold);
    let input_mag = sobel_magnitude(&hazy.luminance());
    let mut sum = Summation::default();
    let mut n = 0usize;
    for ((&on, &out), &inp) in edges.mask.iter().zip(&edges.magnitude).zip(input_mag.data()) {
        if on {
            sum.add((out as f64 / (inp as f64).max(GRADIENT_EPS)).ln());
            n += 1;
        }
    }
    if n == 0 {
        return Ok(GradientRatio {
            value: 1.0,
            empty_mask: true,
        });
    }
    Ok(GradientRatio {
        value: (sum.total() / n as f64).exp(),
        empty_mask: false,
    })
}

fn saturated(px: [f32; 3]) -> bool {
    px.iter().any(|&v| matches!(quantize(v), 0 | 255))
}

/// Percentage of pixels clipped (any channel at 0 or 255 after 8-bit
/// quantization) in the output but not in the hazy input.
pub fn saturation_sigma(hazy: &Image, output: &Image) -> Result<f64> {
    hazy.same_dims(output)?;
    let newly = hazy
        .pixels()
        .zip(output.pixels())
        .filter(|&(a, b)| saturated(b) && !saturated(a))
        .count();
    Ok(100.0 * newly as f64 / (hazy.width() * hazy.height()) as f64)
}

/// Mean over pixels of `std / max(mean, 0.01)` of luminance in a 5×5
/// edge-replicated window.
pub fn mean_local_contrast(image: &Image) -> f64 {
    let lum = image.luminance();
    let (w, h) = lum.dims();
    let r = (CONTRAST_WINDOW / 2) as isize;
    let n = (CONTRAST_WINDOW * CONTRAST_WINDOW) as f64;
    // Horizontal window sums of v and v^2, then vertical.
    let clamp_x = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let clamp_y = |y: isize| y.clamp(0, h as isize - 1) as usize;
    let mut row_s = vec![0f64; w * h];
    let mut row_q = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut q) = (0f64, 0f64);
            for dx in -r..=r {
                let v = lum.get(clamp_x(x as isize + dx), y) as f64;
                s += v;
                q += v * v;
            }
            row_s[y * w + x] = s;
            row_q[y * w + x] = q;
        }
    }
    let mut total = Summation::default();
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut q) = (0f64, 0f64);
            for dy in -r..=r {
                let i = clamp_y(y as isize + dy) * w + x;
                s += row_s[i];
                q += row_q[i];
            }
            let mean = s / n;
            let std = (q / n - mean * mean).max(0.0).sqrt();
            total.add(std / mean.max(CONTRAST_MEAN_FLOOR));
        }
    }
    total.total() / (w * h) as f64
}

/// Mean local contrast of the output minus that of the hazy input.
pub fn contrast_gain_c(hazy: &Image, output: &Image) -> Result<f64> {
    hazy.same_dims(output)?;
    Ok(mean_local_contrast(output) - mean_local_contrast(hazy))
}

/// Neumaier-compensated summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Summation {
    sum: f64,
    comp: f64,
}

impl Summation {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mut s = Summation::default();
        values.iter().for_each(|&v| s.add(v));
        let mean = s.total() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            let mut q = Summation::default();
            values.iter().for_each(|&v| q.add((v - mean) * (v - mean)));
            (q.total() / (n - 1.0)).sqrt()
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}
