//! Patch discriminator over channel-concatenated (condition, image) pairs.
//!
//! `downsamples` 4×4 stride-2 convolutions are followed by one 4×4 stride-1
//! convolution and a 4×4 stride-1 single-channel head with a logistic output.
//! With padding 1 everywhere the grid side is `R / 2^downsamples - 2`, so a
//! 512×512 input with the default four downsamples yields a 30×30 grid.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::add_bias;
use super::ops::{conv2d, instance_norm, leaky_relu, sigmoid};
use super::params::{config_hash, ParamSet};
use super::{Mode, INIT_STD, LEAK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub condition_channels: usize,
    pub image_channels: usize,
    pub base_filters: usize,
    pub downsamples: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { resolution: 512, condition_channels: 3, image_channels: 3, base_filters: 64, downsamples: 4 }
    }
}

/// Kernel and stride of one convolution, input side first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub kernel: usize,
    pub stride: usize,
}

impl DiscriminatorConfig {
    pub fn for_resolution(resolution: usize) -> Self {
        Self { resolution, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsamples == 0 || self.downsamples >= 16 {
            return Err(Error::Config(format!("downsamples must be in 1..16, got {}", self.downsamples)));
        }
        let scale = 1usize << self.downsamples;
        if self.resolution % scale != 0 || self.resolution / scale < 3 {
            return Err(Error::Config(format!(
                "resolution {} must be a multiple of {scale} and at least {}",
                self.resolution,
                3 * scale
            )));
        }
        if self.condition_channels < 1 || self.image_channels < 1 || self.base_filters < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        (self.resolution >> self.downsamples) - 2
    }

    fn channels(&self, layer: usize) -> usize {
        (self.base_filters << (layer - 1).min(16)).min(8 * self.base_filters)
    }

    /// Convolution stack from input to head.
    pub fn layers(&self) -> Vec<LayerGeometry> {
        let mut l = vec![LayerGeometry { kernel: 4, stride: 2 }; self.downsamples];
        l.push(LayerGeometry { kernel: 4, stride: 1 });
        l.push(LayerGeometry { kernel: 4, stride: 1 });
        l
    }

    /// Input-pixel side of the patch seen by one output cell.
    pub fn receptive_field(&self) -> usize {
        self.layers().iter().rev().fold(1, |r, l| (r - 1) * l.stride + l.kernel)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
}

/// Per-cell probabilities that the corresponding patch pair is real, `(N, 1, G, G)`.
#[derive(Debug, Clone)]
pub struct ProbGrid(pub Tensor);

impl ProbGrid {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn mean(&self) -> Result<f64> {
        Ok(self.0.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn detach(&self) -> ProbGrid {
        ProbGrid(self.0.detach())
    }
}

impl Discriminator {
    pub fn build(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new(config_hash(&config));
        let mut in_ch = config.condition_channels + config.image_channels;
        for layer in 1..=config.downsamples + 1 {
            let out_ch = config.channels(layer);
            params.insert_gaussian(format!("conv{layer}.weight"), &[out_ch, in_ch, 4, 4], 0.0, INIT_STD, &mut rng)?;
            if layer == 1 {
                params.insert_constant("conv1.bias", &[out_ch], 0.0)?;
            } else {
                params.insert_gaussian(format!("conv{layer}.norm.scale"), &[out_ch], 1.0, INIT_STD, &mut rng)?;
                params.insert_constant(format!("conv{layer}.norm.shift"), &[out_ch], 0.0)?;
            }
            in_ch = out_ch;
        }
        params.insert_gaussian("head.weight", &[1, in_ch, 4, 4], 0.0, INIT_STD, &mut rng)?;
        params.insert_constant("head.bias", &[1], 0.0)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = config_hash(&config);
        if params.config_hash() != expected {
            return Err(Error::Checkpoint(format!(
                "discriminator config hash mismatch: parameters {} vs config {expected}",
                params.config_hash()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    pub fn forward(&self, condition: &Tensor, image: &Tensor, mode: Mode) -> Result<ProbGrid> {
        let (cd, id) = (condition.dims(), image.dims());
        let r = self.config.resolution;
        let ok = cd.len() == 4
            && id.len() == 4
            && cd[0] == id[0]
            && cd[1] == self.config.condition_channels
            && id[1] == self.config.image_channels
            && cd[2..] == [r, r]
            && id[2..] == [r, r];
        if !ok {
            return Err(Error::Shape(format!(
                "discriminator expects condition (N, {}, {r}, {r}) and image (N, {}, {r}, {r}), got {cd:?} and {id:?}",
                self.config.condition_channels, self.config.image_channels
            )));
        }
        let mut h = Tensor::cat(&[condition, image], 1)?;
        for layer in 1..=self.config.downsamples + 1 {
            let stride = if layer <= self.config.downsamples { 2 } else { 1 };
            h = conv2d(&h, &self.p(&format!("conv{layer}.weight"), mode)?, stride, 1)?;
            h = if layer == 1 {
                add_bias(&h, &self.p("conv1.bias", mode)?)?
            } else {
                instance_norm(
                    &h,
                    &self.p(&format!("conv{layer}.norm.scale"), mode)?,
                    &self.p(&format!("conv{layer}.norm.shift"), mode)?,
                )?
            };
            h = leaky_relu(&h, LEAK)?;
        }
        let logits = add_bias(&conv2d(&h, &self.p("head.weight", mode)?, 1, 1)?, &self.p("head.bias", mode)?)?;
        Ok(ProbGrid(sigmoid(&logits)?))
    }
}
