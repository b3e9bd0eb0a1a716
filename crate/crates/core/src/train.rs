//! Alternating discriminator/generator optimization with checkpointing,
//! line-delimited metrics and seeded reproducibility.
//!
//! Every run draws from separate ChaCha8 streams derived from the config seed:
//! generator init, discriminator init, noise planes and data order. Data order
//! is a pure function of `(seed, step)`, so resuming needs only the noise
//! stream's position, which is stored in the checkpoint.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_batch, Batch, DatasetManifest};
use crate::error::{io_err, Error, Result};
use crate::losses::{
    adversarial_generator_loss, discriminator_loss, feature_loss, pixel_loss, scalar, tv_loss, GeneratorLossKind,
    LossParts, LossTerms, LossWeights,
};
use crate::nn::checkpoint::{self, HostTensors};
use crate::nn::{
    config_hash, Discriminator, DiscriminatorConfig, FeatureMap, FeatureSource, Generator, GeneratorConfig,
    IdentityFeatures, Mode, ParamSet, Vgg16Features,
};

pub const STATE_KIND: &str = "train_state";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Perceptual-loss extractor selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureConfig {
    /// VGG16 trunk up to the ReLU after convolution `tap`. Without `weights`
    /// a He-initialized trunk seeded by `seed` stands in.
    Vgg16 {
        #[serde(default = "default_tap")]
        tap: usize,
        #[serde(default)]
        weights: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
    },
    Identity,
}

fn default_tap() -> usize {
    4
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig::Vgg16 { tap: default_tap(), weights: None, seed: 0 }
    }
}

impl FeatureConfig {
    pub fn build(&self) -> Result<(Box<dyn FeatureMap>, Option<FeatureSource>)> {
        match self {
            FeatureConfig::Vgg16 { tap, weights: Some(path), .. } => {
                let v = Vgg16Features::load(path, *tap)?;
                let src = v.source().clone();
                Ok((Box::new(v), Some(src)))
            }
            FeatureConfig::Vgg16 { tap, weights: None, seed } => {
                log::warn!("no pretrained feature weights configured; using a seeded random VGG16 trunk");
                let v = Vgg16Features::random(*tap, *seed)?;
                let src = v.source().clone();
                Ok((Box::new(v), Some(src)))
            }
            FeatureConfig::Identity => Ok((Box::new(IdentityFeatures), None)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Defaults to 4 at resolutions up to 128 and 1 above.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub total_steps: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub generator_loss: GeneratorLossKind,
    /// Discriminator updates per generator update; 0 freezes the discriminator.
    #[serde(default = "default_d_steps")]
    pub d_steps_per_g_step: u32,
    #[serde(default)]
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to [`GeneratorConfig::for_resolution`].
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub discriminator: Option<DiscriminatorConfig>,
    #[serde(default)]
    pub features: FeatureConfig,
}

fn default_resolution() -> usize {
    512
}
fn default_lr() -> f64 {
    2e-4
}
fn default_betas() -> [f64; 2] {
    [0.5, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}
fn default_d_steps() -> u32 {
    1
}

impl TrainConfig {
    /// Defaults for everything except the required fields.
    pub fn new(train_manifest: PathBuf, output_dir: PathBuf, resolution: usize, total_steps: u64) -> Self {
        Self {
            resolution,
            batch_size: None,
            total_steps,
            learning_rate: default_lr(),
            adam_betas: default_betas(),
            adam_eps: default_eps(),
            weights: LossWeights::default(),
            generator_loss: GeneratorLossKind::default(),
            d_steps_per_g_step: default_d_steps(),
            seed: 0,
            checkpoint_every: 0,
            train_manifest,
            test_manifest: None,
            output_dir,
            generator: None,
            discriminator: None,
            features: FeatureConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Parses a TOML file; relative paths are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut c = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut c.train_manifest);
        fix(&mut c.output_dir);
        if let Some(p) = c.test_manifest.as_mut() {
            fix(p);
        }
        if let FeatureConfig::Vgg16 { weights: Some(p), .. } = &mut c.features {
            fix(p);
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.resolution <= 128 { 4 } else { 1 })
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        self.generator.clone().unwrap_or_else(|| GeneratorConfig::for_resolution(self.resolution))
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        self.discriminator.clone().unwrap_or_else(|| DiscriminatorConfig::for_resolution(self.resolution))
    }

    /// Hash of the two architecture configs; checkpoints carry it.
    pub fn architecture_hash(&self) -> String {
        config_hash(&(self.generator_config(), self.discriminator_config()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size() < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.total_steps < 1 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps > 0".into()));
        }
        self.weights.validate()?;
        let (g, d) = (self.generator_config(), self.discriminator_config());
        g.validate()?;
        d.validate()?;
        if g.resolution != self.resolution || d.resolution != self.resolution {
            return Err(Error::Config(format!(
                "network resolutions ({}, {}) differ from training resolution {}",
                g.resolution, d.resolution, self.resolution
            )));
        }
        if g.hint_channels() != d.condition_channels || g.output_channels != d.image_channels {
            return Err(Error::Config("generator and discriminator channel counts disagree".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept per parameter name, on the host.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HostTensors,
    v: HostTensors,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, betas: [f64; 2], eps: f64) -> Result<Self> {
        let mut m = HostTensors::new();
        for (name, var) in params.iter() {
            m.insert(name.to_string(), (var.dims().to_vec(), vec![0f32; var.elem_count()]));
        }
        Ok(Self { lr, beta1: betas[0], beta2: betas[1], eps, t: 0, v: m.clone(), m })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter with a gradient in `grads`; others are left alone.
    pub fn step(&mut self, params: &ParamSet, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g: Vec<f32> = g.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            let mut p: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
            let missing = || Error::Config(format!("no moment for {name}"));
            let m = &mut self.m.get_mut(name).ok_or_else(missing)?.1;
            let v = &mut self.v.get_mut(name).ok_or_else(missing)?.1;
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                *p = (*p as f64 - self.lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps)) as f32;
            }
            var.set(&Tensor::from_vec(p, var.dims(), &Device::Cpu)?)?;
        }
        Ok(())
    }

    pub fn to_host(&self, prefix: &str, out: &mut HostTensors) -> Result<()> {
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in map {
                out.insert(format!("{prefix}.{kind}.{name}"), t.clone());
            }
        }
        Ok(())
    }

    fn assign(&mut self, prefix: &str, ck: &checkpoint::Checkpoint, t: u64) -> Result<()> {
        for (kind, map) in [("m", &mut self.m), ("v", &mut self.v)] {
            let group = ck.group(&format!("{prefix}.{kind}."));
            if group.len() != map.len() {
                return Err(Error::Checkpoint(format!(
                    "{prefix}.{kind}: expected {} moments, found {}",
                    map.len(),
                    group.len()
                )));
            }
            for (name, slot) in map.iter_mut() {
                let entry = group.get(name).ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.{kind}.{name}")))?;
                if entry.0 != slot.0 || entry.1.len() != slot.1.len() {
                    return Err(Error::Checkpoint(format!("{prefix}.{kind}.{name}: shape {:?}", entry.0)));
                }
                *slot = entry.clone();
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Scalars logged after each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "L_tv")]
    pub l_tv: f64,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    Generator = 1,
    Discriminator = 2,
    Noise = 3,
    Data = 4,
}

fn stream_seed(seed: u64, stream: Stream, extra: u64) -> u64 {
    let mut z = seed
        ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ extra.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Manifest indices for `step`: consecutive slices of per-epoch seeded permutations.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, dataset_len: usize) -> Vec<usize> {
    let n = dataset_len as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|i| {
            let pos = step * batch_size as u64 + i;
            let (epoch, offset) = (pos / n, (pos % n) as usize);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..dataset_len).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Data, epoch)));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("set above").1[offset]
        })
        .collect()
}

/// Both players, their optimizers, the step counter and the noise stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub step: u64,
    noise_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator =
            Generator::build(config.generator_config(), stream_seed(config.seed, Stream::Generator, 0))?;
        let discriminator =
            Discriminator::build(config.discriminator_config(), stream_seed(config.seed, Stream::Discriminator, 0))?;
        let g_opt = Adam::new(generator.params(), config.learning_rate, config.adam_betas, config.adam_eps)?;
        let d_opt = Adam::new(discriminator.params(), config.learning_rate, config.adam_betas, config.adam_eps)?;
        Ok(Self {
            generator,
            discriminator,
            g_opt,
            d_opt,
            step: 0,
            noise_rng: ChaCha8Rng::seed_from_u64(stream_seed(config.seed, Stream::Noise, 0)),
        })
    }

    /// Independent copy: updates to one never reach the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let generator = Generator::from_params(self.generator.config().clone(), self.generator.params().deep_clone()?)?;
        let discriminator =
            Discriminator::from_params(self.discriminator.config().clone(), self.discriminator.params().deep_clone()?)?;
        Ok(Self { generator, discriminator, ..self.clone() })
    }

    /// `(N, 1, R, R)` Gaussian plane with the generator's noise stddev.
    pub fn sample_noise(&mut self, n: usize) -> Result<Tensor> {
        let cfg = self.generator.config();
        let r = cfg.resolution;
        let std = cfg.noise_stddev as f32;
        let values: Vec<f32> = if std == 0.0 {
            vec![0.0; n * r * r]
        } else {
            let dist = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n * r * r).map(|_| dist.sample(&mut self.noise_rng)).collect()
        };
        Ok(Tensor::from_vec(values, (n, 1, r, r), &Device::Cpu)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>, config: &TrainConfig, extra_meta: serde_json::Value) -> Result<()> {
        let mut tensors = HostTensors::new();
        for (prefix, params) in [("generator", self.generator.params()), ("discriminator", self.discriminator.params())] {
            for (name, v) in params.to_host()? {
                tensors.insert(format!("{prefix}.{name}"), v);
            }
        }
        self.g_opt.to_host("g_adam", &mut tensors)?;
        self.d_opt.to_host("d_adam", &mut tensors)?;
        let arch = serde_json::json!({
            "generator": self.generator.config(),
            "discriminator": self.discriminator.config(),
            "train": config,
        });
        let meta = serde_json::json!({
            "step": self.step,
            "g_adam_t": self.g_opt.t,
            "d_adam_t": self.d_opt.t,
            "noise_word_pos": self.noise_rng.get_word_pos().to_string(),
            "extra": extra_meta,
        });
        checkpoint::save(dir, STATE_KIND, arch, &config.architecture_hash(), meta, &tensors)
    }

    /// Restores a state saved by [`TrainState::save`] under the same architecture.
    pub fn load(dir: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let ck = checkpoint::load(dir)?;
        if ck.manifest.kind != STATE_KIND {
            return Err(Error::Checkpoint(format!("{} holds a {:?}, not a training state", dir.display(), ck.manifest.kind)));
        }
        let expected = config.architecture_hash();
        if ck.manifest.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "architecture config hash mismatch: checkpoint {} vs config {expected}",
                ck.manifest.config_hash
            )));
        }
        let mut state = Self::new(config)?;
        let meta = &ck.manifest.meta;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("meta is missing {k}")));
        let as_u64 = |k: &str| -> Result<u64> {
            field(k)?.as_u64().ok_or_else(|| Error::Checkpoint(format!("meta {k} is not an integer")))
        };
        let word_pos: u128 = field("noise_word_pos")?
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("meta noise_word_pos is malformed".into()))?;
        state.generator.params().assign_from(&ck.group("generator."))?;
        state.discriminator.params().assign_from(&ck.group("discriminator."))?;
        state.g_opt.assign("g_adam", &ck, as_u64("g_adam_t")?)?;
        state.d_opt.assign("d_adam", &ck, as_u64("d_adam_t")?)?;
        state.step = as_u64("step")?;
        state.noise_rng.set_word_pos(word_pos);
        Ok(state)
    }
}

fn check_batch(state: &TrainState, batch: &Batch) -> Result<()> {
    let r = state.generator.config().resolution;
    let c = state.generator.config().hint_channels();
    let ok = |t: &Tensor, ch: usize| t.dims().len() == 4 && t.dims()[1] == ch && t.dims()[2..] == [r, r];
    if !ok(&batch.inputs, c) || !ok(&batch.targets, state.generator.config().output_channels) {
        return Err(Error::Shape(format!(
            "batch inputs {:?} / targets {:?} do not match resolution {r}",
            batch.inputs.dims(),
            batch.targets.dims()
        )));
    }
    Ok(())
}

fn non_finite_guard(term: &'static str, value: f64, context: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Loss { term, msg: format!("value {value}; {}", context()) })
    }
}

/// Generator loss terms for `fake`, with the discriminator's parameters detached.
pub fn generator_terms(
    state: &TrainState,
    batch: &Batch,
    fake: &Tensor,
    features: &dyn FeatureMap,
    kind: GeneratorLossKind,
) -> Result<LossTerms> {
    let grid = state.discriminator.forward(&batch.inputs, fake, Mode::Eval)?;
    Ok(LossTerms {
        pixel: pixel_loss(&batch.targets, fake)?,
        feature: feature_loss(features, &batch.targets, fake)?,
        adversarial: adversarial_generator_loss(&grid, kind)?,
        tv: tv_loss(fake)?,
    })
}

/// Discriminator values observed in one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorStats {
    pub loss: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
}

/// One discriminator update on (real pair, detached fake pair). Touches only
/// the discriminator and its optimizer. With `update = false` nothing changes
/// and the values are evaluated without a graph.
pub fn discriminator_step(state: &mut TrainState, batch: &Batch, fake: &Tensor, update: bool) -> Result<DiscriminatorStats> {
    let fake = fake.detach();
    let mode = if update { Mode::Train } else { Mode::Eval };
    let real = state.discriminator.forward(&batch.inputs, &batch.targets, mode)?;
    let fk = state.discriminator.forward(&batch.inputs, &fake, mode)?;
    let loss = discriminator_loss(&real, &fk)?;
    let stats = DiscriminatorStats { loss: scalar(&loss)?, real_mean: real.mean()?, fake_mean: fk.mean()? };
    non_finite_guard("discriminator", stats.loss, || {
        format!("step {}, d_real_mean {}, d_fake_mean {}", state.step + 1, stats.real_mean, stats.fake_mean)
    })?;
    if update {
        let grads = loss.backward()?;
        state.d_opt.step(state.discriminator.params(), &grads)?;
    }
    Ok(stats)
}

/// One generator update from `fake`, which must still carry the generator's
/// graph. The discriminator's parameters are detached and stay untouched.
pub fn generator_step(
    state: &mut TrainState,
    batch: &Batch,
    fake: &Tensor,
    config: &TrainConfig,
    features: &dyn FeatureMap,
) -> Result<LossParts> {
    let terms = generator_terms(state, batch, fake, features, config.generator_loss)?;
    let parts = terms.values()?;
    let total = terms.weighted(&config.weights).map_err(|e| match e {
        Error::Loss { term, msg } => {
            Error::Loss { term, msg: format!("{msg}; step {}, all terms {parts:?}", state.step + 1) }
        }
        other => other,
    })?;
    let grads = total.backward()?;
    state.g_opt.step(state.generator.params(), &grads)?;
    Ok(parts)
}

/// Generator output for this step's fresh noise plane, with graph.
pub fn generate(state: &mut TrainState, batch: &Batch) -> Result<Tensor> {
    check_batch(state, batch)?;
    let noise = state.sample_noise(batch.len())?;
    state.generator.forward(&Tensor::cat(&[&batch.inputs, &noise], 1)?, Mode::Train)
}

/// One discriminator phase followed by one generator update.
///
/// The generator output for this step's noise plane is computed once; the
/// discriminator sees it detached. Loss values in the returned metrics are
/// those evaluated before the respective updates.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    features: &dyn FeatureMap,
) -> Result<StepMetrics> {
    let fake = generate(state, batch)?;
    let mut d = None;
    for _ in 0..config.d_steps_per_g_step {
        d = Some(discriminator_step(state, batch, &fake, true)?);
    }
    let d = match d {
        Some(d) => d,
        None => discriminator_step(state, batch, &fake, false)?,
    };
    let parts = generator_step(state, batch, &fake, config, features)?;

    let step = state.step + 1;
    for (label, params) in [("generator", state.generator.params()), ("discriminator", state.discriminator.params())] {
        if let Some(name) = params.first_non_finite()? {
            return Err(Error::NonFinite(format!(
                "{label} parameter {name} after step {step}; losses {parts:?}, L_D {}",
                d.loss
            )));
        }
    }
    state.step = step;
    Ok(StepMetrics {
        step,
        l_p: parts.pixel,
        l_f: parts.feature,
        l_g: parts.adversarial,
        l_tv: parts.tv,
        l_d: d.loss,
        d_real_mean: d.real_mean,
        d_fake_mean: d.fake_mean,
    })
}

/// Per-term magnitudes on one batch, raw and multiplied by their weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub raw: LossParts,
    pub weighted: LossParts,
}

/// Evaluates the generator terms on `batch` without updating anything.
pub fn calibrate(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    features: &dyn FeatureMap,
) -> Result<Calibration> {
    check_batch(state, batch)?;
    let noise = state.sample_noise(batch.len())?;
    let fake = state.generator.forward(&Tensor::cat(&[&batch.inputs, &noise], 1)?, Mode::Eval)?;
    let raw = generator_terms(state, batch, &fake, features, config.generator_loss)?.values()?;
    let w = &config.weights;
    let weighted = LossParts {
        pixel: w.w_p * raw.pixel,
        feature: w.w_f * raw.feature,
        adversarial: w.w_g * raw.adversarial,
        tv: w.w_tv * raw.tv,
    };
    Ok(Calibration { raw, weighted })
}

pub fn checkpoint_dir(output_dir: &Path, step: u64) -> PathBuf {
    output_dir.join("checkpoints").join(format!("step-{step:08}"))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Runs from step 0, or from `resume` when given, up to `config.total_steps`.
/// Metrics append to `output_dir/metrics.jsonl`.
pub fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = DatasetManifest::read(&config.train_manifest)?;
    if manifest.is_empty() {
        return Err(Error::Config(format!("{} has no entries", config.train_manifest.display())));
    }
    if manifest.resolution != config.resolution {
        return Err(Error::Config(format!(
            "manifest resolution {} differs from config resolution {}",
            manifest.resolution, config.resolution
        )));
    }
    let (features, source) = config.features.build()?;
    let mut state = match resume {
        Some(dir) => TrainState::load(dir, config)?,
        None => TrainState::new(config)?,
    };
    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let metrics_path = config.output_dir.join(METRICS_FILE);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut log_out = BufWriter::new(file);
    let meta = serde_json::json!({ "feature_source": source });

    let batch_size = config.batch_size();
    let mut metrics = Vec::new();
    let mut final_checkpoint = None;
    while state.step < config.total_steps {
        let indices = batch_indices(config.seed, state.step, batch_size, manifest.len());
        let batch = load_batch(&manifest, &indices)?;
        let m = train_step(&mut state, &batch, config, features.as_ref())?;
        writeln!(log_out, "{}", serde_json::to_string(&m)?).map_err(io_err(&metrics_path))?;
        metrics.push(m);
        let due = config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0;
        if due || state.step == config.total_steps {
            log_out.flush().map_err(io_err(&metrics_path))?;
            let dir = checkpoint_dir(&config.output_dir, state.step);
            state.save(&dir, config, meta.clone())?;
            log::info!("step {}: L_p {:.4} L_D {:.4}; checkpoint {}", m.step, m.l_p, m.l_d, dir.display());
            final_checkpoint = Some(dir);
        }
    }
    log_out.flush().map_err(io_err(&metrics_path))?;
    let final_checkpoint = match final_checkpoint {
        Some(dir) => dir,
        None => {
            let dir = checkpoint_dir(&config.output_dir, state.step);
            state.save(&dir, config, meta)?;
            dir
        }
    };
    Ok(TrainOutcome { state, metrics, final_checkpoint })
}
