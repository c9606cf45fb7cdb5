//! Frozen VGG-19 feature extractor for the perceptual loss.
//!
//! Pretrained weights are read from a safetensors file using torchvision's
//! `features.{idx}.weight` / `features.{idx}.bias` names. Without a file the
//! extractor falls back to seeded random weights on the same layer sequence.

use std::path::{Path, PathBuf};

use haze_autograd::{ConvGeom, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const VGG19: [Option<usize>; 21] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
    Some(512),
    None,
];

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VggConfig {
    /// safetensors file with torchvision VGG-19 `features.*` tensors.
    pub weights: Option<PathBuf>,
    /// Activation to tap, e.g. `relu4_3` (after the 11th convolution).
    pub tap: String,
    pub allow_fallback: bool,
    pub fallback_seed: u64,
    /// Divides every fallback layer width; 1 keeps the VGG-19 widths.
    pub width_divisor: usize,
}

impl Default for VggConfig {
    fn default() -> Self {
        Self {
            weights: None,
            tap: "relu4_3".into(),
            allow_fallback: true,
            fallback_seed: 19,
            width_divisor: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Pretrained(PathBuf),
    Fallback { seed: u64, width_divisor: usize },
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { weight: Var, bias: Var },
    Relu,
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Conv(usize),
    Relu,
    Pool,
}

/// Layer sequence of `features` up to and including the tap point, as
/// (torchvision index, name, step).
fn plan(tap: &str) -> Result<Vec<(usize, String, Step)>> {
    let mut out = Vec::new();
    let (mut block, mut conv) = (1, 0);
    for entry in VGG19 {
        match entry {
            Some(w) => {
                conv += 1;
                out.push((out.len(), format!("conv{block}_{conv}"), Step::Conv(w)));
                out.push((out.len(), format!("relu{block}_{conv}"), Step::Relu));
            }
            None => {
                out.push((out.len(), format!("pool{block}"), Step::Pool));
                block += 1;
                conv = 0;
            }
        }
        if let Some(end) = out.iter().position(|l| l.1 == tap) {
            out.truncate(end + 1);
            return Ok(out);
        }
    }
    Err(Error::Config(format!("unknown VGG-19 tap point {tap:?}")))
}

pub struct FeatureExtractor {
    layers: Vec<Layer>,
    tap: String,
    source: WeightSource,
}

impl FeatureExtractor {
    pub fn from_config(cfg: &VggConfig) -> Result<Self> {
        match &cfg.weights {
            Some(path) => Self::pretrained(path, &cfg.tap),
            None if cfg.allow_fallback => {
                log::warn!("no VGG-19 weights configured; using seeded random features (seed {})", cfg.fallback_seed);
                Self::fallback(&cfg.tap, cfg.fallback_seed, cfg.width_divisor)
            }
            None => Err(Error::Config("VGG-19 weights are not configured and fallback is disabled".into())),
        }
    }

    pub fn pretrained(path: &Path, tap: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Config(format!("{}: not a safetensors file ({e})", path.display())))?;
        let read = |name: &str, shape: &[usize]| -> Result<Var> {
            let view = st
                .tensor(name)
                .map_err(|_| Error::Config(format!("{}: missing tensor {name}", path.display())))?;
            if view.dtype() != Dtype::F32 {
                return Err(Error::Config(format!("{}: {name} is {:?}, expected F32", path.display(), view.dtype())));
            }
            if view.shape() != shape {
                return Err(Error::Config(format!(
                    "{}: {name} has shape {:?}, expected {shape:?}",
                    path.display(),
                    view.shape()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Var::constant(Tensor::from_vec(shape, data).expect("shape checked")))
        };
        let mut layers = Vec::new();
        let mut cin = 3;
        for (idx, _, step) in plan(tap)? {
            layers.push(match step {
                Step::Conv(w) => {
                    let weight = read(&format!("features.{idx}.weight"), &[w, cin, 3, 3])?;
                    let bias = read(&format!("features.{idx}.bias"), &[w])?;
                    cin = w;
                    Layer::Conv { weight, bias }
                }
                Step::Relu => Layer::Relu,
                Step::Pool => Layer::Pool,
            });
        }
        Ok(Self {
            layers,
            tap: tap.to_string(),
            source: WeightSource::Pretrained(path.to_path_buf()),
        })
    }

    /// Kaiming-normal random weights, zero biases.
    pub fn fallback(tap: &str, seed: u64, width_divisor: usize) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Config("VGG width divisor must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (_, _, step) in plan(tap)? {
            layers.push(match step {
                Step::Conv(w) => {
                    let w = (w / width_divisor).max(1);
                    let fan_in = (cin * 9) as f32;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                    let data = (0..w * cin * 9).map(|_| normal.sample(&mut rng)).collect();
                    let weight = Var::constant(Tensor::from_vec(&[w, cin, 3, 3], data).expect("length matches"));
                    cin = w;
                    Layer::Conv {
                        weight,
                        bias: Var::constant(Tensor::zeros(&[w])),
                    }
                }
                Step::Relu => Layer::Relu,
                Step::Pool => Layer::Pool,
            });
        }
        Ok(Self {
            layers,
            tap: tap.to_string(),
            source: WeightSource::Fallback { seed, width_divisor },
        })
    }

    pub fn tap(&self) -> &str {
        &self.tap
    }

    pub fn source(&self) -> &WeightSource {
        &self.source
    }

    /// Features of `[N, 3, S, S]` network-range images. Inputs are mapped
    /// to `[0, 1]` and ImageNet-normalized first.
    pub fn features(&self, x: &Var) -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("[N, 3, H, W]", format!("{s:?}")));
        }
        let scale: Vec<f32> = IMAGENET_STD.iter().map(|sd| 0.5 / sd).collect();
        let shift: Vec<f32> = (0..3).map(|c| (0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]).collect();
        let per_channel = |v: Vec<f32>| Var::constant(Tensor::from_vec(&[1, 3, 1, 1], v).expect("3 values")).broadcast_to(&s);
        let mut h = x.mul(&per_channel(scale)).add(&per_channel(shift));
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { weight, bias } => {
                    let hw = (h.shape()[2], h.shape()[3]);
                    let y = h.conv2d(weight, ConvGeom::forward(hw, 3, 1, 1));
                    let c = bias.shape()[0];
                    y.add(&bias.reshape(&[1, c, 1, 1]).broadcast_to(y.shape()))
                }
                Layer::Relu => h.relu(),
                Layer::Pool => {
                    if h.shape()[2] < 2 || h.shape()[3] < 2 {
                        return Err(Error::shape("spatial size >= 2 before pooling", format!("{:?}", h.shape())));
                    }
                    h.max_pool2()
                }
            };
        }
        Ok(h)
    }
}
