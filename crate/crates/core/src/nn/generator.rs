//! U-Net generator.
//!
//! Encoder stage `i` halves the resolution with a 4×4 stride-2 convolution
//! (`base · 2^(i-1)` filters, capped at `8 · base`). Decoder stage `i` doubles it
//! with a 4×4 stride-2 transposed convolution whose input is the previous
//! decoder output concatenated with encoder stage `i`'s activation. Stage 1 of
//! the decoder emits the output channels through `tanh`.

use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{conv2d, conv_transpose2d, instance_norm, leaky_relu};
use super::params::{config_hash, ParamSet};
use super::{Mode, INIT_STD, LEAK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Hint-image channels plus the trailing noise channel.
    pub input_channels: usize,
    pub output_channels: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub noise_stddev: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { resolution: 512, input_channels: 4, output_channels: 3, depth: 8, base_filters: 64, noise_stddev: 0.1 }
    }
}

impl GeneratorConfig {
    /// Defaults at `resolution`, with depth set so the bottleneck is 2×2.
    pub fn for_resolution(resolution: usize) -> Self {
        let depth = resolution.max(4).ilog2() as usize - 1;
        Self { resolution, depth, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth >= usize::BITS as usize {
            return Err(Error::Config(format!("generator depth must be >= 1, got {}", self.depth)));
        }
        let scale = 1usize << self.depth;
        if self.resolution < scale || self.resolution % scale != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not a multiple of 2^{} = {scale}",
                self.resolution, self.depth
            )));
        }
        if self.input_channels < 1 || self.output_channels < 1 || self.base_filters < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if !(self.noise_stddev >= 0.0) {
            return Err(Error::Config("noise_stddev must be >= 0".into()));
        }
        Ok(())
    }

    pub fn hint_channels(&self) -> usize {
        self.input_channels - 1
    }

    /// Output channels of encoder stage `stage` (1-based).
    pub fn encoder_channels(&self, stage: usize) -> usize {
        let doubled = self.base_filters.saturating_mul(1usize << (stage - 1).min(16));
        doubled.min(8 * self.base_filters)
    }

    pub fn bottleneck_size(&self) -> usize {
        self.resolution >> self.depth
    }

    fn encoder_norm(&self, stage: usize) -> bool {
        stage > 1 && stage < self.depth
    }

    fn decoder_norm(stage: usize) -> bool {
        stage > 1
    }

    /// Input channels seen by decoder stage `stage`.
    pub fn decoder_in_channels(&self, stage: usize) -> usize {
        if stage == self.depth {
            self.encoder_channels(stage)
        } else {
            // Decoder stage `stage + 1` outputs encoder stage `stage`'s width.
            2 * self.encoder_channels(stage)
        }
    }

    pub fn decoder_out_channels(&self, stage: usize) -> usize {
        if stage == 1 {
            self.output_channels
        } else {
            self.encoder_channels(stage - 1)
        }
    }
}

/// Shapes observed at one skip concatenation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipTrace {
    pub stage: usize,
    pub decoder_channels: usize,
    pub encoder_channels: usize,
    pub concat_channels: usize,
    pub decoder_spatial: (usize, usize),
    pub encoder_spatial: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
}

impl Generator {
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new(config_hash(&config));
        let mut in_ch = config.input_channels;
        for stage in 1..=config.depth {
            let out_ch = config.encoder_channels(stage);
            params.insert_gaussian(format!("enc{stage}.weight"), &[out_ch, in_ch, 4, 4], 0.0, INIT_STD, &mut rng)?;
            if config.encoder_norm(stage) {
                params.insert_gaussian(format!("enc{stage}.norm.scale"), &[out_ch], 1.0, INIT_STD, &mut rng)?;
                params.insert_constant(format!("enc{stage}.norm.shift"), &[out_ch], 0.0)?;
            } else {
                params.insert_constant(format!("enc{stage}.bias"), &[out_ch], 0.0)?;
            }
            in_ch = out_ch;
        }
        for stage in (1..=config.depth).rev() {
            let (cin, cout) = (config.decoder_in_channels(stage), config.decoder_out_channels(stage));
            params.insert_gaussian(format!("dec{stage}.weight"), &[cin, cout, 4, 4], 0.0, INIT_STD, &mut rng)?;
            if GeneratorConfig::decoder_norm(stage) {
                params.insert_gaussian(format!("dec{stage}.norm.scale"), &[cout], 1.0, INIT_STD, &mut rng)?;
                params.insert_constant(format!("dec{stage}.norm.shift"), &[cout], 0.0)?;
            } else {
                params.insert_constant(format!("dec{stage}.bias"), &[cout], 0.0)?;
            }
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking the config hash.
    pub fn from_params(config: GeneratorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = config_hash(&config);
        if params.config_hash() != expected {
            return Err(Error::Checkpoint(format!(
                "generator config hash mismatch: parameters {} vs config {expected}",
                params.config_hash()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn p(&self, name: &str, mode: Mode) -> Result<Tensor> {
        let t = self.params.get(name)?;
        Ok(match mode {
            Mode::Train => t.clone(),
            Mode::Eval => t.detach(),
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let dims = input.dims();
        let r = self.config.resolution;
        if dims.len() != 4 || dims[1] != self.config.input_channels || dims[2] != r || dims[3] != r {
            return Err(Error::Shape(format!(
                "generator expects (N, {}, {r}, {r}), got {dims:?}",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    /// `input`: `(N, input_channels, R, R)` in `[-1, 1]`, noise in the last
    /// channel. Returns `(N, output_channels, R, R)` in `(-1, 1)`.
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_inner(input, mode, None)
    }

    /// Forward pass that also records the shapes at every skip concatenation.
    pub fn forward_traced(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Vec<SkipTrace>)> {
        let mut trace = Vec::with_capacity(self.config.depth);
        let out = self.forward_inner(input, mode, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward_inner(&self, input: &Tensor, mode: Mode, mut trace: Option<&mut Vec<SkipTrace>>) -> Result<Tensor> {
        self.check_input(input)?;
        let depth = self.config.depth;
        let mut skips: Vec<Tensor> = Vec::with_capacity(depth);
        let mut h = input.clone();
        for stage in 1..=depth {
            let x = if stage == 1 { h } else { leaky_relu(&h, LEAK)? };
            let mut y = conv2d(&x, &self.p(&format!("enc{stage}.weight"), mode)?, 2, 1)?;
            y = if self.config.encoder_norm(stage) {
                instance_norm(
                    &y,
                    &self.p(&format!("enc{stage}.norm.scale"), mode)?,
                    &self.p(&format!("enc{stage}.norm.shift"), mode)?,
                )?
            } else {
                add_bias(&y, &self.p(&format!("enc{stage}.bias"), mode)?)?
            };
            skips.push(y.clone());
            h = y;
        }

        let mut d = skips[depth - 1].clone();
        for stage in (1..=depth).rev() {
            let x = if stage == depth {
                d
            } else {
                let enc = &skips[stage - 1];
                let cat = Tensor::cat(&[&d, enc], 1)?;
                if let Some(t) = trace.as_deref_mut() {
                    let (_, dc, dh, dw) = d.dims4()?;
                    let (_, ec, eh, ew) = enc.dims4()?;
                    t.push(SkipTrace {
                        stage,
                        decoder_channels: dc,
                        encoder_channels: ec,
                        concat_channels: cat.dim(1)?,
                        decoder_spatial: (dh, dw),
                        encoder_spatial: (eh, ew),
                    });
                }
                cat
            };
            let y = conv_transpose2d(&x.relu()?, &self.p(&format!("dec{stage}.weight"), mode)?, 2, 1)?;
            d = if GeneratorConfig::decoder_norm(stage) {
                instance_norm(
                    &y,
                    &self.p(&format!("dec{stage}.norm.scale"), mode)?,
                    &self.p(&format!("dec{stage}.norm.shift"), mode)?,
                )?
            } else {
                add_bias(&y, &self.p(&format!("dec{stage}.bias"), mode)?)?
            };
        }
        Ok(d.tanh()?)
    }
}

pub(crate) fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dim(D::Minus1)?;
    Ok(x.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}
