//! U-Net generator and conditional PatchGAN critic.
//!
//! Networks own their parameters as plain tensors. Each forward pass binds
//! them into the autodiff graph, either as trainable leaves or as constants,
//! so the trainer decides per phase which side receives gradients.

use haze_autograd::{ConvGeom, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{from_net_tensor, to_net_tensor};
use crate::error::{Error, Result};
use crate::image::Image;

pub const KERNEL: usize = 4;
pub const LEAKY_SLOPE: f32 = 0.2;
pub const INIT_STD: f32 = 0.02;
pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub input_channels: usize,
    pub output_channels: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            output_channels: 3,
            base_width: 64,
            depth: 8,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.output_channels == 0 || self.base_width == 0 {
            return Err(Error::invalid(format!("generator channel counts must be positive: {self:?}")));
        }
        if self.depth == 0 {
            return Err(Error::invalid("generator depth must be >= 1"));
        }
        Ok(())
    }

    /// Encoder stage widths; they double per stage up to 8× the base.
    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_width << i.min(3)).min(8 * self.base_width))
            .collect()
    }

    pub fn describe(&self) -> String {
        format!(
            "unet(in={},out={},base={},depth={},k={KERNEL},norm=none,down=lrelu{LEAKY_SLOPE},up=relu,head=tanh)",
            self.input_channels, self.output_channels, self.base_width, self.depth
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Instance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSpec {
    /// Channels of the concatenated (condition, candidate) input.
    pub input_channels: usize,
    pub widths: Vec<usize>,
    /// Applied after every stage but the first.
    pub normalization: Normalization,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            input_channels: 6,
            widths: vec![64, 128, 256, 512],
            normalization: Normalization::Instance,
        }
    }
}

impl CriticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_channels % 2 != 0 {
            return Err(Error::invalid(format!(
                "critic input channels must be a positive even number, got {}",
                self.input_channels
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid(format!("critic widths must be non-empty and positive: {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        format!(
            "patchgan(in={},widths={},k={KERNEL},norm={:?},act=lrelu{LEAKY_SLOPE},reduce=mean)",
            self.input_channels,
            widths.join(","),
            self.normalization
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize },
    ConvTranspose { stride: usize },
    InstanceNorm,
    LeakyRelu,
    Relu,
    Tanh,
    Concat,
    MeanReduce,
}

impl LayerKind {
    pub fn is_normalization(&self) -> bool {
        matches!(self, LayerKind::InstanceNorm)
    }

    /// Whether outputs of one sample depend on other samples in the batch.
    pub fn couples_batch(&self) -> bool {
        false
    }
}

/// One row of an architecture table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("length matches")
}

/// Binds parameters into a graph: trainable leaves or constants.
pub fn bind(params: &[Param], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            if trainable {
                Var::param(p.value.clone())
            } else {
                Var::constant(p.value.clone())
            }
        })
        .collect()
}

fn square_hw(shape: &[usize], channels: usize) -> Result<usize> {
    if shape.len() != 4 || shape[1] != channels || shape[2] != shape[3] || shape[2] == 0 || shape[0] == 0 {
        return Err(Error::shape(format!("[N, {channels}, S, S]"), format!("{shape:?}")));
    }
    Ok(shape[2])
}

/// k4 convolution on an `n × n` map: padded by 1 with the given stride, or
/// a size-preserving stage once the map is too small to shrink.
fn stage_geom(n: usize, stride: usize) -> ConvGeom {
    if n + 2 >= KERNEL && (stride == 1 || n >= 2) {
        ConvGeom::forward((n, n), KERNEL, stride, 1)
    } else {
        ConvGeom::same((n, n), KERNEL, 1)
    }
}

fn add_bias(x: &Var, bias: &Var) -> Var {
    let c = bias.shape()[0];
    x.add(&bias.reshape(&[1, c, 1, 1]).broadcast_to(x.shape()))
}

/// Per-sample, per-channel normalization over the spatial axes.
pub fn instance_norm(x: &Var) -> Var {
    let s = x.shape().to_vec();
    let per = (s[2] * s[3]) as f32;
    let stat = [s[0], s[1], 1, 1];
    let mean = x.sum_to(&stat).scale(1.0 / per).broadcast_to(&s);
    let centered = x.sub(&mean);
    let var = centered.square().sum_to(&stat).scale(1.0 / per);
    centered.mul(&var.add_scalar(NORM_EPS).sqrt().recip().broadcast_to(&s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    params: Vec<Param>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::param_shapes(&spec)
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    gaussian(&shape, &mut rng)
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { spec, params })
    }

    fn param_shapes(spec: &GeneratorSpec) -> Vec<(String, Vec<usize>)> {
        let w = spec.encoder_widths();
        let mut out = Vec::new();
        for i in 0..spec.depth {
            let cin = if i == 0 { spec.input_channels } else { w[i - 1] };
            out.push((format!("enc{i}.weight"), vec![w[i], cin, KERNEL, KERNEL]));
            out.push((format!("enc{i}.bias"), vec![w[i]]));
        }
        for i in (0..spec.depth).rev() {
            let narrow = if i == spec.depth - 1 { w[i] } else { 2 * w[i] };
            let wide = if i == 0 { spec.output_channels } else { w[i - 1] };
            out.push((format!("dec{i}.weight"), vec![narrow, wide, KERNEL, KERNEL]));
            out.push((format!("dec{i}.bias"), vec![wide]));
        }
        out
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let w = self.spec.encoder_widths();
        let count = |name: &str| {
            self.params
                .iter()
                .filter(|p| p.name.starts_with(name))
                .map(|p| p.value.numel())
                .sum()
        };
        let mut out = Vec::new();
        let mut push = |name: String, kind, cin, cout, params| out.push(LayerInfo { name, kind, in_channels: cin, out_channels: cout, params });
        for i in 0..self.spec.depth {
            let cin = if i == 0 { self.spec.input_channels } else { w[i - 1] };
            if i > 0 {
                push(format!("enc{i}.act"), LayerKind::LeakyRelu, cin, cin, 0);
            }
            push(format!("enc{i}"), LayerKind::Conv { stride: 2 }, cin, w[i], count(&format!("enc{i}.")));
        }
        for i in (0..self.spec.depth).rev() {
            let narrow = if i == self.spec.depth - 1 { w[i] } else { 2 * w[i] };
            let wide = if i == 0 { self.spec.output_channels } else { w[i - 1] };
            if i != self.spec.depth - 1 {
                push(format!("dec{i}.skip"), LayerKind::Concat, w[i], narrow, 0);
            }
            push(format!("dec{i}.act"), LayerKind::Relu, narrow, narrow, 0);
            push(format!("dec{i}"), LayerKind::ConvTranspose { stride: 2 }, narrow, wide, count(&format!("dec{i}.")));
        }
        push("head".into(), LayerKind::Tanh, self.spec.output_channels, self.spec.output_channels, 0);
        out
    }

    /// `x` is `[N, C, S, S]`; `params` come from [`bind`] on [`Generator::params`].
    pub fn forward(&self, x: &Var, params: &[Var]) -> Result<Var> {
        let n = square_hw(x.shape(), self.spec.input_channels)?;
        let depth = self.spec.depth;
        let mut geoms = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut size = n;
        let mut h = x.clone();
        for i in 0..depth {
            let g = stage_geom(size, 2);
            let input = if i == 0 { h.clone() } else { h.leaky_relu(LEAKY_SLOPE) };
            h = add_bias(&input.conv2d(&params[2 * i], g), &params[2 * i + 1]);
            size = g.out_hw.0;
            geoms.push(g);
            skips.push(h.clone());
        }
        let mut p = 2 * depth;
        for i in (0..depth).rev() {
            let input = if i == depth - 1 { h.clone() } else { Var::concat(&[h.clone(), skips[i].clone()]) };
            h = add_bias(&input.relu().conv_transpose2d(&params[p], geoms[i]), &params[p + 1]);
            p += 2;
        }
        Ok(h.tanh())
    }

    /// Inference on a `[N, C, S, S]` tensor without building gradients.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let params = bind(&self.params, false);
        Ok(self.forward(&Var::constant(x.clone()), &params)?.value().clone())
    }

    /// Runs one image through the network at `size × size` and resizes the
    /// result back to the input's dimensions.
    pub fn dehaze(&self, hazy: &Image, size: usize) -> Result<Image> {
        let shape_err = |e: haze_autograd::ShapeError| Error::shape("[3, S, S]", e.to_string());
        let x = to_net_tensor(hazy, size, "").values.reshape(&[1, 3, size, size]).map_err(shape_err)?;
        let y = self.infer(&x)?.reshape(&[3, size, size]).map_err(shape_err)?;
        let out = from_net_tensor(&y)?;
        let (w, h) = hazy.dims();
        Ok(if out.dims() == (w, h) { out } else { out.resize_bilinear(w, h) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    spec: CriticSpec,
    params: Vec<Param>,
}

impl Critic {
    pub fn new(spec: CriticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::param_shapes(&spec)
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    gaussian(&shape, &mut rng)
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { spec, params })
    }

    fn stage_has_norm(spec: &CriticSpec, i: usize) -> bool {
        i > 0 && spec.normalization == Normalization::Instance
    }

    fn param_shapes(spec: &CriticSpec) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = spec.input_channels;
        for (i, &w) in spec.widths.iter().enumerate() {
            out.push((format!("stage{i}.weight"), vec![w, cin, KERNEL, KERNEL]));
            // A bias in front of instance norm would be cancelled by it.
            if !Self::stage_has_norm(spec, i) {
                out.push((format!("stage{i}.bias"), vec![w]));
            }
            cin = w;
        }
        out.push(("score.weight".into(), vec![1, cin, KERNEL, KERNEL]));
        out.push(("score.bias".into(), vec![1]));
        out
    }

    pub fn spec(&self) -> &CriticSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn stride(&self, i: usize) -> usize {
        if i + 1 == self.spec.widths.len() && i > 0 {
            1
        } else {
            2
        }
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let count = |name: &str| {
            self.params
                .iter()
                .filter(|p| p.name.starts_with(name))
                .map(|p| p.value.numel())
                .sum()
        };
        let mut out = vec![LayerInfo {
            name: "pair".into(),
            kind: LayerKind::Concat,
            in_channels: self.spec.input_channels / 2,
            out_channels: self.spec.input_channels,
            params: 0,
        }];
        let mut cin = self.spec.input_channels;
        for (i, &w) in self.spec.widths.iter().enumerate() {
            let prefix = format!("stage{i}");
            out.push(LayerInfo {
                name: prefix.clone(),
                kind: LayerKind::Conv { stride: self.stride(i) },
                in_channels: cin,
                out_channels: w,
                params: count(&format!("{prefix}.")),
            });
            if Self::stage_has_norm(&self.spec, i) {
                out.push(LayerInfo { name: format!("{prefix}.norm"), kind: LayerKind::InstanceNorm, in_channels: w, out_channels: w, params: 0 });
            }
            out.push(LayerInfo { name: format!("{prefix}.act"), kind: LayerKind::LeakyRelu, in_channels: w, out_channels: w, params: 0 });
            cin = w;
        }
        out.push(LayerInfo { name: "score".into(), kind: LayerKind::Conv { stride: 1 }, in_channels: cin, out_channels: 1, params: count("score.") });
        out.push(LayerInfo { name: "reduce".into(), kind: LayerKind::MeanReduce, in_channels: 1, out_channels: 1, params: 0 });
        out
    }

    /// Scores `[N]` for conditions and candidates of shape `[N, C/2, S, S]`.
    pub fn forward(&self, condition: &Var, candidate: &Var, params: &[Var]) -> Result<Var> {
        let half = self.spec.input_channels / 2;
        let n = square_hw(condition.shape(), half)?;
        if candidate.shape() != condition.shape() {
            return Err(Error::shape(format!("{:?}", condition.shape()), format!("{:?}", candidate.shape())));
        }
        let mut h = Var::concat(&[condition.clone(), candidate.clone()]);
        let mut size = n;
        let mut p = 0;
        for i in 0..self.spec.widths.len() {
            let g = stage_geom(size, self.stride(i));
            h = h.conv2d(&params[p], g);
            p += 1;
            if Self::stage_has_norm(&self.spec, i) {
                h = instance_norm(&h);
            } else {
                h = add_bias(&h, &params[p]);
                p += 1;
            }
            h = h.leaky_relu(LEAKY_SLOPE);
            size = g.out_hw.0;
        }
        let g = stage_geom(size, 1);
        let map = add_bias(&h.conv2d(&params[p], g), &params[p + 1]);
        let cells = (g.out_hw.0 * g.out_hw.1) as f32;
        Ok(map.sum_per_sample().scale(1.0 / cells))
    }
}

/// `D(I, X)` for a single pair of 3×S×S tensors. The score is unbounded.
pub fn critic_score(critic: &Critic, condition: &Tensor, candidate: &Tensor) -> Result<f32> {
    if condition.shape() != candidate.shape() {
        return Err(Error::shape(format!("{:?}", condition.shape()), format!("{:?}", candidate.shape())));
    }
    let lift = |t: &Tensor| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.reshape(&shape).map(Var::constant).map_err(|e| Error::shape("[C, S, S]", e.to_string()))
    };
    let params = bind(critic.params(), false);
    let score = critic.forward(&lift(condition)?, &lift(candidate)?, &params)?;
    Ok(score.value().data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gen() -> GeneratorSpec {
        GeneratorSpec { base_width: 4, depth: 4, ..Default::default() }
    }

    fn input(n: usize, s: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 3, s, s], (0..n * 3 * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn widths_cap_at_eight_times_base() {
        let spec = GeneratorSpec::default();
        assert_eq!(spec.encoder_widths(), vec![64, 128, 256, 512, 512, 512, 512, 512]);
    }

    #[test]
    fn generator_preserves_shape_at_several_sizes() {
        let g = Generator::new(small_gen(), 1).unwrap();
        for s in [1, 3, 8, 13, 32] {
            let y = g.infer(&input(2, s, 2)).unwrap();
            assert_eq!(y.shape(), &[2, 3, s, s]);
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generator_rejects_non_square() {
        let g = Generator::new(small_gen(), 1).unwrap();
        let x = Var::constant(Tensor::zeros(&[1, 3, 8, 6]));
        assert!(g.forward(&x, &bind(g.params(), false)).is_err());
    }

    #[test]
    fn layer_table_matches_parameters() {
        let g = Generator::new(small_gen(), 1).unwrap();
        let table: usize = g.layers().iter().map(|l| l.params).sum();
        assert_eq!(table, g.param_count());
        let c = Critic::new(CriticSpec { widths: vec![4, 8, 8], ..Default::default() }, 1).unwrap();
        let table: usize = c.layers().iter().map(|l| l.params).sum();
        assert_eq!(table, c.param_count());
    }

    #[test]
    fn critic_scores_one_per_sample() {
        let c = Critic::new(CriticSpec { widths: vec![4, 8, 8], ..Default::default() }, 3).unwrap();
        let (i, x) = (input(3, 16, 4), input(3, 16, 5));
        let s = c.forward(&Var::constant(i), &Var::constant(x), &bind(c.params(), false)).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert!(s.value().all_finite());
    }

    #[test]
    fn critic_score_rejects_mismatch() {
        let c = Critic::new(CriticSpec { widths: vec![4, 8], ..Default::default() }, 3).unwrap();
        assert!(critic_score(&c, &Tensor::zeros(&[3, 8, 8]), &Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(Generator::new(GeneratorSpec { depth: 0, ..Default::default() }, 0).is_err());
        assert!(Critic::new(CriticSpec { widths: vec![], ..Default::default() }, 0).is_err());
        assert!(Critic::new(CriticSpec { input_channels: 5, ..Default::default() }, 0).is_err());
    }
}
