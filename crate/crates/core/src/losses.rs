//! Training objectives: L1 and perceptual losses, the gradient penalty on
//! interpolated samples, and the critic and generator objectives. Every
//! objective is a value to minimize.

use haze_autograd::{grad, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::networks::{bind, Critic, Generator};
use crate::vgg::FeatureExtractor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Perceptual term.
    pub lambda1: f32,
    /// L1 term.
    pub lambda2: f32,
    /// Gradient penalty.
    pub lambda3: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 100.0,
            lambda3: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `D(I, X)`: one score per sample, shape `[N]`.
pub trait CriticFn {
    fn score(&self, condition: &Var, candidate: &Var) -> Result<Var>;
}

impl<F: Fn(&Var, &Var) -> Var> CriticFn for F {
    fn score(&self, condition: &Var, candidate: &Var) -> Result<Var> {
        Ok(self(condition, candidate))
    }
}

/// `G(I)`.
pub trait GeneratorFn {
    fn generate(&self, hazy: &Var) -> Result<Var>;
}

impl<F: Fn(&Var) -> Var> GeneratorFn for F {
    fn generate(&self, hazy: &Var) -> Result<Var> {
        Ok(self(hazy))
    }
}

/// A critic whose parameters are bound into the current graph.
pub struct BoundCritic<'a> {
    critic: &'a Critic,
    params: Vec<Var>,
}

impl<'a> BoundCritic<'a> {
    pub fn new(critic: &'a Critic, trainable: bool) -> Self {
        Self {
            critic,
            params: bind(critic.params(), trainable),
        }
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

impl CriticFn for BoundCritic<'_> {
    fn score(&self, condition: &Var, candidate: &Var) -> Result<Var> {
        self.critic.forward(condition, candidate, &self.params)
    }
}

pub struct BoundGenerator<'a> {
    generator: &'a Generator,
    params: Vec<Var>,
}

impl<'a> BoundGenerator<'a> {
    pub fn new(generator: &'a Generator, trainable: bool) -> Self {
        Self {
            generator,
            params: bind(generator.params(), trainable),
        }
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

impl GeneratorFn for BoundGenerator<'_> {
    fn generate(&self, hazy: &Var) -> Result<Var> {
        self.generator.forward(hazy, &self.params)
    }
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(reference: &Var, candidate: &Var) -> Result<Var> {
    same_shape(reference.shape(), candidate.shape())?;
    Ok(candidate.sub(reference).abs().mean())
}

/// Mean squared difference over all elements of the tapped feature maps.
pub fn vgg_loss(reference: &Var, candidate: &Var, phi: &FeatureExtractor) -> Result<Var> {
    same_shape(reference.shape(), candidate.shape())?;
    let (fr, fc) = (phi.features(reference)?, phi.features(candidate)?);
    Ok(fc.sub(&fr).square().mean())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatedSample {
    pub j_hat: Tensor,
    pub alphas: Vec<f32>,
}

/// `α J + (1 − α) G(I)` per sample of a `[N, ...]` batch.
pub fn interpolate(j: &Tensor, gi: &Tensor, alphas: &[f32]) -> Result<InterpolatedSample> {
    same_shape(j.shape(), gi.shape())?;
    let n = *j.shape().first().ok_or_else(|| Error::invalid("interpolate needs a batch axis"))?;
    if alphas.len() != n {
        return Err(Error::shape(n, alphas.len()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::invalid(format!("interpolation factor must lie in [0, 1], got {a}")));
    }
    let per = j.numel() / n.max(1);
    let mut data = Vec::with_capacity(j.numel());
    for (s, &a) in alphas.iter().enumerate() {
        let range = s * per..(s + 1) * per;
        data.extend(j.data()[range.clone()].iter().zip(&gi.data()[range]).map(|(&jv, &gv)| a * jv + (1.0 - a) * gv));
    }
    Ok(InterpolatedSample {
        j_hat: Tensor::from_vec(j.shape(), data).expect("same length"),
        alphas: alphas.to_vec(),
    })
}

pub struct Penalty {
    /// Mean over the batch of `(‖∇_Ĵ D(I, Ĵ)‖₂ − 1)²`, shape `[1]`.
    pub value: Var,
    pub alphas: Vec<f32>,
    /// `∇_Ĵ D(I, Ĵ)`, shaped like the batch.
    pub gradient: Tensor,
    pub grad_norms: Vec<f32>,
}

fn check_scores(scores: &Var, n: usize) -> Result<()> {
    if scores.shape() != [n] {
        return Err(Error::CriticContract(format!("critic returned shape {:?} for a batch of {n}", scores.shape())));
    }
    if !scores.value().all_finite() {
        // Step is unknown here; the trainer fills it in.
        return Err(Error::NonFinite { what: "critic score".into(), step: 0 });
    }
    Ok(())
}

/// Gradient penalty with one uniform α per sample drawn from `rng`.
pub fn gradient_penalty(
    critic: &dyn CriticFn,
    condition: &Tensor,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut impl Rng,
) -> Result<Penalty> {
    let n = real.shape().first().copied().unwrap_or(0);
    let alphas: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
    gradient_penalty_at(critic, condition, real, fake, &alphas)
}

/// Gradient penalty at fixed interpolation factors. The condition is not
/// interpolated and is not penalized.
pub fn gradient_penalty_at(
    critic: &dyn CriticFn,
    condition: &Tensor,
    real: &Tensor,
    fake: &Tensor,
    alphas: &[f32],
) -> Result<Penalty> {
    same_shape(condition.shape(), real.shape())?;
    let sample = interpolate(real, fake, alphas)?;
    let n = alphas.len();
    if n == 0 {
        return Err(Error::invalid("gradient penalty needs a non-empty batch"));
    }
    let j_hat = Var::param(sample.j_hat);
    let scores = critic.score(&Var::constant(condition.clone()), &j_hat)?;
    check_scores(&scores, n)?;
    let g = grad(&scores.sum(), &[&j_hat], true).remove(0);
    if !g.value().all_finite() {
        return Err(Error::NonFinite { what: "critic gradient".into(), step: 0 });
    }
    let norms = g.square().sum_per_sample().sqrt();
    let grad_norms = norms.value().data().to_vec();
    Ok(Penalty {
        value: norms.add_scalar(-1.0).square().mean(),
        alphas: sample.alphas,
        gradient: g.value().clone(),
        grad_norms,
    })
}

fn batch_vars(batch: &Batch) -> Result<(Var, Var, usize)> {
    let n = batch.hazy.shape().first().copied().unwrap_or(0);
    if n == 0 || batch.hazy.numel() == 0 {
        return Err(Error::invalid("objective needs a non-empty batch"));
    }
    same_shape(batch.hazy.shape(), batch.clear.shape())?;
    Ok((Var::constant(batch.hazy.clone()), Var::constant(batch.clear.clone()), n))
}

fn mean_score(critic: &dyn CriticFn, condition: &Var, candidate: &Var, n: usize) -> Result<Var> {
    let s = critic.score(condition, candidate)?;
    check_scores(&s, n)?;
    Ok(s.mean())
}

pub struct CriticTerms {
    /// `mean D(I, G(I)) − mean D(I, J) + λ3 · GP`.
    pub objective: Var,
    pub penalty: Penalty,
    /// `mean D(I, J) − mean D(I, G(I))`.
    pub wasserstein: f32,
}

/// The generator output is detached, so only the critic's bound
/// parameters can receive gradients from the result.
pub fn critic_objective(
    critic: &dyn CriticFn,
    generator: &dyn GeneratorFn,
    batch: &Batch,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<CriticTerms> {
    let (hazy, clear, n) = batch_vars(batch)?;
    let fake = generator.generate(&hazy)?.value().clone();
    let real_mean = mean_score(critic, &hazy, &clear, n)?;
    let fake_mean = mean_score(critic, &hazy, &Var::constant(fake.clone()), n)?;
    let penalty = gradient_penalty(critic, &batch.hazy, &batch.clear, &fake, rng)?;
    let objective = fake_mean.sub(&real_mean).add(&penalty.value.scale(weights.lambda3));
    Ok(CriticTerms {
        objective,
        wasserstein: real_mean.sub(&fake_mean).value().item(),
        penalty,
    })
}

pub struct GeneratorTerms {
    /// `λ1 · vgg + λ2 · L1 − mean D(I, G(I))`.
    pub objective: Var,
    /// Not computed when `λ1 == 0`.
    pub vgg: Option<f32>,
    pub l1: f32,
    pub adversarial: f32,
}

/// Only the generator's bound parameters should be trainable here.
pub fn generator_objective(
    critic: &dyn CriticFn,
    generator: &dyn GeneratorFn,
    batch: &Batch,
    phi: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<GeneratorTerms> {
    let (hazy, clear, n) = batch_vars(batch)?;
    let gi = generator.generate(&hazy)?;
    same_shape(gi.shape(), clear.shape())?;
    let l1 = l1_loss(&clear, &gi)?;
    let adv = mean_score(critic, &hazy, &gi, n)?;
    let (vgg_term, vgg) = if weights.lambda1 > 0.0 {
        let v = vgg_loss(&clear, &gi, phi)?;
        let item = v.value().item();
        (v.scale(weights.lambda1), Some(item))
    } else {
        (Var::constant(Tensor::zeros(&[1])), None)
    };
    let objective = vgg_term.add(&l1.scale(weights.lambda2)).sub(&adv);
    Ok(GeneratorTerms {
        objective,
        vgg,
        l1: l1.value().item(),
        adversarial: adv.value().item(),
    })
}

/// `mean D(I, J) − mean D(I, G(I))`.
pub fn wasserstein_estimate(critic: &dyn CriticFn, batch: &Batch, generator: &dyn GeneratorFn) -> Result<f32> {
    let (hazy, clear, n) = batch_vars(batch)?;
    let fake = Var::constant(generator.generate(&hazy)?.value().clone());
    let real_mean = mean_score(critic, &hazy, &clear, n)?;
    let fake_mean = mean_score(critic, &hazy, &fake, n)?;
    Ok(real_mean.sub(&fake_mean).value().item())
}
