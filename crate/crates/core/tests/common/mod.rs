#![allow(dead_code)]

pub mod metric_oracles;

use std::path::Path;

use cwgan_dehaze::data::{generate_synthetic_dataset, DatasetManifest, SyntheticConfig};
use cwgan_dehaze::image::Image;
use cwgan_dehaze::networks::{Critic, CriticSpec, GeneratorSpec};
use cwgan_dehaze::trainer::TrainConfig;
use cwgan_dehaze::vgg::VggConfig;
use haze_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_generator() -> GeneratorSpec {
    GeneratorSpec {
        base_width: 4,
        depth: 3,
        ..Default::default()
    }
}

pub fn tiny_critic() -> CriticSpec {
    CriticSpec {
        widths: vec![4, 8],
        ..Default::default()
    }
}

/// Small enough that a cycle takes milliseconds.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        image_size: 16,
        batch_size: 2,
        epochs: 1,
        generator: tiny_generator(),
        critic: tiny_critic(),
        vgg: VggConfig {
            width_divisor: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn tiny_dataset(dir: &Path, count: usize, seed: u64) -> DatasetManifest {
    generate_synthetic_dataset(
        dir,
        &SyntheticConfig {
            count,
            size: 16,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth colour field with some texture, values in [0.1, 0.9].
pub fn texture(w: usize, h: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let phase: [f32; 6] = std::array::from_fn(|_| r.gen_range(0.0..6.28));
    Image::from_fn(w, h, |x, y| {
        let (x, y) = (x as f32, y as f32);
        std::array::from_fn(|c| {
            let v = 0.5 + 0.2 * (0.7 * x + phase[c]).sin() * (0.45 * y + phase[c + 3]).cos() + 0.15 * ((x * 1.9 + y * 1.3 + c as f32).sin());
            v.clamp(0.1, 0.9)
        })
    })
}

/// Naive f64 re-implementation of the critic, one sample at a time.
/// `cond` and `cand` are `C×S×S` row-major.
pub struct CriticOracle {
    spec: CriticSpec,
    params: Vec<Vec<f64>>,
}

impl CriticOracle {
    pub fn new(critic: &Critic) -> Self {
        Self {
            spec: critic.spec().clone(),
            params: critic.params().iter().map(|p| p.value.data().iter().map(|&v| v as f64).collect()).collect(),
        }
    }

    fn geom(n: usize, stride: usize) -> (usize, usize, usize) {
        // (stride, pad, out) with kernel 4; tiny maps keep their size.
        if n + 2 >= 4 && (stride == 1 || n >= 2) {
            (stride, 1, (n + 2 - 4) / stride + 1)
        } else {
            (1, 1, n)
        }
    }

    fn conv(input: &[f64], cin: usize, n: usize, w: &[f64], cout: usize, stride: usize, pad: usize, out_n: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * out_n * out_n];
        for o in 0..cout {
            for oy in 0..out_n {
                for ox in 0..out_n {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= n as isize || ix >= n as isize {
                                    continue;
                                }
                                acc += w[((o * cin + c) * 4 + ky) * 4 + kx] * input[(c * n + iy as usize) * n + ix as usize];
                            }
                        }
                    }
                    out[(o * out_n + oy) * out_n + ox] = acc;
                }
            }
        }
        out
    }

    pub fn score(&self, cond: &[f64], cand: &[f64], n: usize) -> f64 {
        let mut h: Vec<f64> = cond.iter().chain(cand).copied().collect();
        let mut cin = self.spec.input_channels;
        let mut size = n;
        let mut p = 0;
        let stages = self.spec.widths.len();
        for (i, &w) in self.spec.widths.iter().enumerate() {
            let stride = if i + 1 == stages && i > 0 { 1 } else { 2 };
            let (s, pad, out_n) = Self::geom(size, stride);
            h = Self::conv(&h, cin, size, &self.params[p], w, s, pad, out_n);
            p += 1;
            let cells = out_n * out_n;
            if i > 0 {
                for c in 0..w {
                    let ch = &mut h[c * cells..(c + 1) * cells];
                    let mean = ch.iter().sum::<f64>() / cells as f64;
                    let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cells as f64;
                    let inv = 1.0 / (var + 1e-5).sqrt();
                    ch.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                }
            } else {
                for c in 0..w {
                    h[c * cells..(c + 1) * cells].iter_mut().for_each(|v| *v += self.params[p][c]);
                }
                p += 1;
            }
            h.iter_mut().for_each(|v| {
                if *v <= 0.0 {
                    *v *= 0.2
                }
            });
            cin = w;
            size = out_n;
        }
        let (s, pad, out_n) = Self::geom(size, 1);
        let map = Self::conv(&h, cin, size, &self.params[p], 1, s, pad, out_n);
        map.iter().map(|v| v + self.params[p + 1][0]).sum::<f64>() / map.len() as f64
    }
}
