//! Alternating critic/generator optimization with deterministic batching,
//! JSON-lines logging and periodic checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use haze_autograd::{grad, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::save_checkpoint;
use crate::data::{BatchStream, DatasetManifest, PairSource, StreamCursor};
use crate::error::{Error, Result};
use crate::losses::{critic_objective, generator_objective, BoundCritic, BoundGenerator, LossWeights};
use crate::networks::{Critic, CriticSpec, Generator, GeneratorSpec, Param};
use crate::optim::{Adam, AdamConfig};
use crate::vgg::{FeatureExtractor, VggConfig};

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const GENERATOR_STREAM: u64 = 0;
const CRITIC_STREAM: u64 = 1;
const ALPHA_SALT: u64 = 0xA1FA_5EED;
const CRITIC_INIT_SALT: u64 = 0xC417_1C00;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub n_critic: u32,
    pub batch_size: usize,
    /// Generator passes over the training set.
    pub epochs: u64,
    /// Stops the stage early after this many generator steps.
    pub max_generator_steps: Option<u64>,
    pub seed: u64,
    /// Side of the square network input.
    pub image_size: usize,
    pub weights: LossWeights,
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
    pub vgg: VggConfig,
    pub checkpoint_dir: Option<PathBuf>,
    /// Generator steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Decoded training tensors stay in memory up to this size.
    pub cache_budget_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            n_critic: 5,
            batch_size: 4,
            epochs: 1,
            max_generator_steps: None,
            seed: 0,
            image_size: 256,
            weights: LossWeights::default(),
            generator: GeneratorSpec::default(),
            critic: CriticSpec::default(),
            vgg: VggConfig::default(),
            checkpoint_dir: None,
            checkpoint_interval: 0,
            cache_budget_mb: 1024,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// `epochs` may be 0 here, which makes a stage a no-op.
    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.weights.validate()?;
        self.generator.validate()?;
        self.critic.validate()?;
        if self.n_critic == 0 {
            return Err(Error::invalid("n_critic must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.image_size == 0 {
            return Err(Error::invalid("image size must be >= 1"));
        }
        if self.critic.input_channels != 2 * self.generator.output_channels
            || self.generator.input_channels != self.generator.output_channels
        {
            return Err(Error::invalid(format!(
                "critic input channels {} must be twice the image channels {}",
                self.critic.input_channels, self.generator.output_channels
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        architecture_fingerprint(&self.generator, &self.critic)
    }
}

pub fn architecture_description(generator: &GeneratorSpec, critic: &CriticSpec) -> String {
    format!("generator={};critic={}", generator.describe(), critic.describe())
}

/// SHA-256 of the architecture and normalization choices.
pub fn architecture_fingerprint(generator: &GeneratorSpec, critic: &CriticSpec) -> [u8; 32] {
    Sha256::digest(architecture_description(generator, critic).as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shapes(params: &[Param]) -> Vec<&[usize]> {
    params.iter().map(|p| p.value.shape()).collect()
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub critic: Critic,
    pub generator_adam: Adam,
    pub critic_adam: Adam,
    pub generator_steps: u64,
    pub critic_steps: u64,
    /// Generator step count when the current stage began.
    pub stage_start: u64,
    pub generator_cursor: StreamCursor,
    pub critic_cursor: StreamCursor,
    pub alpha_rng: ChaCha8Rng,
    pub fingerprint: [u8; 32],
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone(), config.seed)?;
        let critic = Critic::new(config.critic.clone(), splitmix(config.seed ^ CRITIC_INIT_SALT))?;
        let generator_adam = Adam::new(config.adam(), &shapes(generator.params()));
        let critic_adam = Adam::new(config.adam(), &shapes(critic.params()));
        Ok(Self {
            fingerprint: config.fingerprint(),
            alpha_rng: ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ ALPHA_SALT)),
            config,
            generator,
            critic,
            generator_adam,
            critic_adam,
            generator_steps: 0,
            critic_steps: 0,
            stage_start: 0,
            generator_cursor: StreamCursor::default(),
            critic_cursor: StreamCursor::default(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.generator_cursor.epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Critic,
    Generator,
}

/// One line of the training log, emitted after every update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// 1-based index over all updates of both networks.
    pub step: u64,
    pub phase: Phase,
    pub generator_step: u64,
    pub critic_step: u64,
    pub epoch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_objective: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_penalty: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wasserstein_estimate: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_objective: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vgg: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<f32>,
    /// Seconds since the process started this stage.
    pub wall_time: f64,
}

impl TrainLogRecord {
    /// The record with its wall-clock field zeroed, for comparisons.
    pub fn timeless(&self) -> Self {
        Self {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

/// Append-only JSON-lines training log.
pub struct JsonlLog {
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    /// Opens an existing log for a resumed run, dropping records past `step`.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<TrainLogRecord> = if path.exists() {
            read_log(path)?.into_iter().filter(|r| r.step <= step).collect()
        } else {
            Vec::new()
        };
        let mut log = Self::create(path)?;
        for r in &kept {
            log.append(r)?;
        }
        log.flush()?;
        let f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn append(&mut self, record: &TrainLogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io("training log", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("training log", e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn ensure_finite(what: &str, v: f32, step: u64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite { what: what.to_string(), step });
    }
    Ok(())
}

/// Stamps the update index onto a non-finite error raised below the trainer.
fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        other => other,
    }
}

fn gradients(objective: &Var, params: &[Var], step: u64, what: &str) -> Result<Vec<Tensor>> {
    let grads: Vec<Tensor> = grad(objective, &params.iter().collect::<Vec<_>>(), false)
        .into_iter()
        .map(|g| g.value().clone())
        .collect();
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite {
            what: format!("{what} gradient"),
            step,
        });
    }
    Ok(grads)
}

fn param_refs(params: &mut [Param]) -> Vec<&mut Tensor> {
    params.iter_mut().map(|p| &mut p.value).collect()
}

/// Drives one training stage (initial training or a transfer stage).
pub struct Trainer {
    state: TrainState,
    source: PairSource,
    phi: FeatureExtractor,
    generator_stream: BatchStream,
    critic_stream: BatchStream,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        Self::from_state(TrainState::new(config)?, manifest)
    }

    /// Continues from a saved state; `config` may change run-length and
    /// checkpoint settings but not the architecture.
    pub fn resume(mut state: TrainState, config: Option<TrainConfig>, manifest: &DatasetManifest) -> Result<Self> {
        if let Some(config) = config {
            config.validate()?;
            if config.fingerprint() != state.fingerprint {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "checkpoint architecture {} does not match configured {}",
                    hex(&state.fingerprint),
                    hex(&config.fingerprint())
                )));
            }
            state.config = config;
        }
        Self::from_state(state, manifest)
    }

    /// A transfer stage starting from `checkpoint`'s weights, not yet run.
    pub fn transfer(checkpoint: TrainState, config: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        config.validate()?;
        if config.fingerprint() != checkpoint.fingerprint {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint architecture {} does not match configured {}",
                hex(&checkpoint.fingerprint),
                hex(&config.fingerprint())
            )));
        }
        let state = TrainState {
            generator_adam: Adam::new(config.adam(), &shapes(checkpoint.generator.params())),
            critic_adam: Adam::new(config.adam(), &shapes(checkpoint.critic.params())),
            stage_start: checkpoint.generator_steps,
            generator_cursor: StreamCursor::default(),
            critic_cursor: StreamCursor::default(),
            alpha_rng: ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ ALPHA_SALT)),
            config,
            ..checkpoint
        };
        Self::from_state(state, manifest)
    }

    fn from_state(state: TrainState, manifest: &DatasetManifest) -> Result<Self> {
        state.config.validate()?;
        let cfg = &state.config;
        let source = PairSource::open(manifest, cfg.image_size, cfg.cache_budget_mb << 20)?;
        let phi = FeatureExtractor::from_config(&cfg.vgg)?;
        let n = source.len();
        let generator_stream = BatchStream::new(n, cfg.batch_size, cfg.seed, GENERATOR_STREAM, false, state.generator_cursor);
        let critic_stream = BatchStream::new(n, cfg.batch_size, cfg.seed, CRITIC_STREAM, true, state.critic_cursor);
        Ok(Self {
            state,
            source,
            phi,
            generator_stream,
            critic_stream,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.generator_stream.batches_per_epoch() as u64
    }

    /// Generator step count at which this stage ends.
    pub fn target_generator_steps(&self) -> u64 {
        let cfg = &self.state.config;
        let mut steps = cfg.epochs.saturating_mul(self.batches_per_epoch());
        if let Some(max) = cfg.max_generator_steps {
            steps = steps.min(max);
        }
        self.state.stage_start + steps
    }

    pub fn is_done(&self) -> bool {
        self.state.generator_steps >= self.target_generator_steps()
    }

    fn record(&self, phase: Phase) -> TrainLogRecord {
        let c = self.generator_stream.cursor;
        let epoch = if c.offset >= self.source.len() { c.epoch + 1 } else { c.epoch };
        TrainLogRecord {
            step: self.state.generator_steps + self.state.critic_steps,
            phase,
            generator_step: self.state.generator_steps,
            critic_step: self.state.critic_steps,
            epoch,
            critic_objective: None,
            gradient_penalty: None,
            wasserstein_estimate: None,
            generator_objective: None,
            l1: None,
            vgg: None,
            adversarial: None,
            wall_time: self.started.elapsed().as_secs_f64(),
        }
    }

    /// One Adam update of the critic on a fresh batch.
    pub fn critic_step(&mut self) -> Result<TrainLogRecord> {
        let (_, indices) = self.critic_stream.next_batch();
        let batch = self.source.batch(&indices)?;
        let step = self.state.critic_steps + 1;
        let (grads, objective, penalty, wasserstein) = {
            let critic = BoundCritic::new(&self.state.critic, true);
            let generator = BoundGenerator::new(&self.state.generator, false);
            let terms = critic_objective(&critic, &generator, &batch, &self.state.config.weights, &mut self.state.alpha_rng)
                .map_err(|e| at_step(e, step))?;
            let objective = terms.objective.value().item();
            let penalty = terms.penalty.value.value().item();
            ensure_finite("critic objective", objective, step)?;
            ensure_finite("gradient penalty", penalty, step)?;
            let grads = gradients(&terms.objective, critic.params(), step, "critic")?;
            (grads, objective, penalty, terms.wasserstein)
        };
        self.state.critic_adam.step(&mut param_refs(self.state.critic.params_mut()), &grads);
        self.state.critic_steps = step;
        self.state.critic_cursor = self.critic_stream.cursor;
        let mut r = self.record(Phase::Critic);
        r.critic_objective = Some(objective);
        r.gradient_penalty = Some(penalty);
        r.wasserstein_estimate = Some(wasserstein);
        Ok(r)
    }

    /// One Adam update of the generator on the next batch of the epoch.
    pub fn generator_step(&mut self) -> Result<TrainLogRecord> {
        let (_, indices) = self.generator_stream.next_batch();
        let batch = self.source.batch(&indices)?;
        let step = self.state.generator_steps + 1;
        let (grads, terms) = {
            let critic = BoundCritic::new(&self.state.critic, false);
            let generator = BoundGenerator::new(&self.state.generator, true);
            let terms = generator_objective(&critic, &generator, &batch, &self.phi, &self.state.config.weights)
                .map_err(|e| at_step(e, step))?;
            ensure_finite("generator objective", terms.objective.value().item(), step)?;
            let grads = gradients(&terms.objective, generator.params(), step, "generator")?;
            (grads, (terms.objective.value().item(), terms.l1, terms.vgg, terms.adversarial))
        };
        self.state.generator_adam.step(&mut param_refs(self.state.generator.params_mut()), &grads);
        self.state.generator_steps = step;
        self.state.generator_cursor = self.generator_stream.cursor;
        let mut r = self.record(Phase::Generator);
        r.generator_objective = Some(terms.0);
        r.l1 = Some(terms.1);
        r.vgg = terms.2;
        r.adversarial = Some(terms.3);
        Ok(r)
    }

    /// `n_critic` critic updates followed by one generator update.
    pub fn cycle(&mut self, observer: &mut dyn FnMut(&TrainLogRecord) -> Result<()>) -> Result<()> {
        for _ in 0..self.state.config.n_critic {
            let r = self.critic_step()?;
            observer(&r)?;
        }
        let r = self.generator_step()?;
        observer(&r)
    }

    pub fn save(&self, name: &str) -> Result<Option<PathBuf>> {
        match &self.state.config.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(name);
                save_checkpoint(&path, &self.state)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }

    /// Trains until the stage target, checkpointing at the configured
    /// interval and at the end. On a non-finite value the run stops and the
    /// latest checkpoint on disk is left untouched.
    pub fn run(&mut self, observer: &mut dyn FnMut(&TrainLogRecord) -> Result<()>) -> Result<()> {
        let interval = self.state.config.checkpoint_interval;
        while !self.is_done() {
            if let Err(e) = self.cycle(observer) {
                if matches!(e, Error::NonFinite { .. }) {
                    log::error!("training aborted: {e}; last good checkpoint kept");
                }
                return Err(e);
            }
            if interval > 0 && self.state.generator_steps % interval == 0 {
                self.save(LATEST_CHECKPOINT)?;
            }
        }
        self.save(LATEST_CHECKPOINT)?;
        self.save(FINAL_CHECKPOINT)?;
        Ok(())
    }
}

pub fn train(
    config: TrainConfig,
    manifest: &DatasetManifest,
    observer: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<TrainState> {
    if config.epochs == 0 {
        return Err(Error::invalid("epochs must be >= 1"));
    }
    let mut trainer = Trainer::new(config, manifest)?;
    trainer.run(observer)?;
    Ok(trainer.into_state())
}

/// Continues training both networks on a new dataset for `config.epochs`
/// epochs, with fresh optimizer moments and batch streams.
pub fn transfer_learn(
    checkpoint: TrainState,
    config: TrainConfig,
    manifest: &DatasetManifest,
    observer: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<TrainState> {
    let mut trainer = Trainer::transfer(checkpoint, config, manifest)?;
    trainer.run(observer)?;
    Ok(trainer.into_state())
}

/// Continues an interrupted stage from a checkpoint file.
pub fn resume_training(
    checkpoint: &Path,
    config: Option<TrainConfig>,
    manifest: &DatasetManifest,
    observer: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<TrainState> {
    let state = crate::checkpoint::load_checkpoint(checkpoint)?;
    let mut trainer = Trainer::resume(state, config, manifest)?;
    trainer.run(observer)?;
    Ok(trainer.into_state())
}
