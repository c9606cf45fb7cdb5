//! Brute-force loop versions of the image metrics, written from their
//! definitions without sharing code with the library.

use cwgan_dehaze::image::Image;
use rand::Rng;

use super::{rng, texture};

pub const N: usize = 16;

pub fn lum(img: &Image, x: usize, y: usize) -> f64 {
    let p = img.pixel(x, y);
    (0.299f32 * p[0] + 0.587f32 * p[1] + 0.114f32 * p[2]) as f64
}

pub fn lum_clamped(img: &Image, x: isize, y: isize) -> f64 {
    let (w, h) = img.dims();
    lum(img, x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize)
}

pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut se = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                let d = a.pixel(x, y)[c] as f64 - b.pixel(x, y)[c] as f64;
                se += d * d;
            }
        }
    }
    let mse = se / (a.width() * a.height() * 3) as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h) = a.dims();
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let weight = |i: usize, j: usize| g[i] * g[j] / (gs * gs);
            let (mut ma, mut mb) = (0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    ma += weight(i, j) * lum(a, x0 + i, y0 + j);
                    mb += weight(i, j) * lum(b, x0 + i, y0 + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let (da, db) = (lum(a, x0 + i, y0 + j) - ma, lum(b, x0 + i, y0 + j) - mb);
                    va += weight(i, j) * da * da;
                    vb += weight(i, j) * db * db;
                    cov += weight(i, j) * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn sobel_oracle(img: &Image, x: usize, y: usize) -> f64 {
    let (x, y) = (x as isize, y as isize);
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let (mut gx, mut gy) = (0.0, 0.0);
    for j in 0..3 {
        for i in 0..3 {
            let v = lum_clamped(img, x + i as isize - 1, y + j as isize - 1);
            gx += kx[j][i] * v;
            gy += kx[i][j] * v;
        }
    }
    (gx * gx + gy * gy).sqrt() / 2.0
}

pub fn r_oracle(hazy: &Image, out: &Image, threshold: f64) -> f64 {
    let mut logs = Vec::new();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let o = sobel_oracle(out, x, y);
            if o > threshold {
                logs.push((o / sobel_oracle(hazy, x, y).max(1e-6)).ln());
            }
        }
    }
    if logs.is_empty() {
        1.0
    } else {
        (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    }
}

pub fn clipped(img: &Image, x: usize, y: usize) -> bool {
    img.pixel(x, y).iter().any(|&v| {
        let q = (v.clamp(0.0, 1.0) * 255.0).round();
        q == 0.0 || q == 255.0
    })
}

pub fn sigma_oracle(hazy: &Image, out: &Image) -> f64 {
    let mut n = 0;
    for y in 0..out.height() {
        for x in 0..out.width() {
            if clipped(out, x, y) && !clipped(hazy, x, y) {
                n += 1;
            }
        }
    }
    100.0 * n as f64 / (out.width() * out.height()) as f64
}

pub fn contrast_oracle(img: &Image) -> f64 {
    let mut total = 0.0;
    for y in 0..img.height() as isize {
        for x in 0..img.width() as isize {
            let mut vals = Vec::with_capacity(25);
            for dy in -2..=2 {
                for dx in -2..=2 {
                    vals.push(lum_clamped(img, x + dx, y + dy));
                }
            }
            let mean = vals.iter().sum::<f64>() / 25.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
            total += var.sqrt() / mean.max(0.01);
        }
    }
    total / (img.width() * img.height()) as f64
}

/// Texture with about a tenth of its pixels pushed to the extremes.
pub fn punchy(seed: u64) -> Image {
    let mut r = rng(seed);
    let base = texture(N, N, seed);
    Image::from_fn(N, N, |x, y| {
        let p = base.pixel(x, y);
        if r.gen_bool(0.1) {
            [1.0, p[1], p[2]]
        } else {
            p.map(|v| (0.5 + 1.6 * (v - 0.5)).clamp(0.0, 1.0))
        }
    })
}

pub fn fixtures() -> Vec<(Image, Image)> {
    (0..6).map(|s| (texture(N, N, s), punchy(s + 100))).collect()
}
