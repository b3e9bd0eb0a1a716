//! Frozen feature extractors for the perceptual loss.
//!
//! [`Vgg16Features`] is the convolutional trunk of the 16-layer VGG classifier,
//! truncated after the ReLU of the `tap`-th convolution. Weights use the
//! torchvision key layout (`features.{index}.weight`/`.bias`) and load from a
//! safetensors file or a checkpoint directory. When no pretrained weights are
//! available a seeded He-initialized trunk is used and recorded as such.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint;
use super::ops::conv2d;
use crate::error::{io_err, Error, Result};

/// A frozen map from images in `[-1, 1]` (`(N, 3, H, W)`) to activations.
pub trait FeatureMap: Send + Sync {
    fn features(&self, x: &Tensor) -> Result<Tensor>;
}

/// Reduces the feature loss to mean squared pixel error.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFeatures;

impl FeatureMap for IdentityFeatures {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

const VGG16: [Option<usize>; 18] = [
    Some(64), Some(64), None,
    Some(128), Some(128), None,
    Some(256), Some(256), Some(256), None,
    Some(512), Some(512), Some(512), None,
    Some(512), Some(512), Some(512), None,
];
pub const VGG16_CONVS: usize = 13;
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    Random { seed: u64 },
    File { path: PathBuf, sha256: String },
}

#[derive(Debug, Clone)]
enum Layer {
    Conv { weight: Tensor, bias: Tensor },
    Pool,
}

#[derive(Debug, Clone)]
pub struct Vgg16Features {
    layers: Vec<Layer>,
    tap: usize,
    source: FeatureSource,
}

/// `(torchvision index, in channels, out channels)` for each convolution up to `tap`,
/// plus the pool positions in between.
fn plan(tap: usize) -> Result<Vec<Option<(usize, usize, usize)>>> {
    if tap == 0 || tap > VGG16_CONVS {
        return Err(Error::Config(format!("feature tap must be in 1..={VGG16_CONVS}, got {tap}")));
    }
    let (mut out, mut index, mut in_ch, mut convs) = (Vec::new(), 0usize, 3usize, 0usize);
    for entry in VGG16 {
        match entry {
            Some(ch) => {
                out.push(Some((index, in_ch, ch)));
                in_ch = ch;
                index += 2;
                convs += 1;
                if convs == tap {
                    break;
                }
            }
            None => {
                out.push(None);
                index += 1;
            }
        }
    }
    Ok(out)
}

impl Vgg16Features {
    /// He-initialized trunk, for running without pretrained weights.
    pub fn random(tap: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for step in plan(tap)? {
            layers.push(match step {
                Some((_, cin, cout)) => {
                    let std = (2.0 / (cin * 9) as f64).sqrt();
                    let dist = Normal::new(0.0f32, std as f32).expect("valid std");
                    let w: Vec<f32> = (0..cout * cin * 9).map(|_| dist.sample(&mut rng)).collect();
                    Layer::Conv {
                        weight: Tensor::from_vec(w, (cout, cin, 3, 3), &Device::Cpu)?,
                        bias: Tensor::zeros(cout, DType::F32, &Device::Cpu)?,
                    }
                }
                None => Layer::Pool,
            });
        }
        Ok(Self { layers, tap, source: FeatureSource::Random { seed } })
    }

    /// Loads pretrained weights from a `.safetensors` file or a checkpoint directory.
    pub fn load(path: impl AsRef<Path>, tap: usize) -> Result<Self> {
        let path = path.as_ref();
        let (tensors, sha256) = if path.is_dir() {
            let ck = checkpoint::load(path)?;
            let blob = path.join(checkpoint::BLOB_FILE);
            let bytes = std::fs::read(&blob).map_err(io_err(&blob))?;
            let map: HashMap<String, Tensor> = ck
                .tensors
                .into_iter()
                .map(|(k, (shape, data))| Ok((k, Tensor::from_vec(data, shape, &Device::Cpu)?)))
                .collect::<Result<_>>()?;
            (map, hex::encode(Sha256::digest(bytes)))
        } else {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            let map = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
            (map, hex::encode(Sha256::digest(&bytes)))
        };
        let mut layers = Vec::new();
        for step in plan(tap)? {
            layers.push(match step {
                Some((index, cin, cout)) => {
                    let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                        let key = format!("features.{index}.{suffix}");
                        let t = tensors
                            .get(&key)
                            .ok_or_else(|| Error::Load { path: path.to_path_buf(), msg: format!("missing {key}") })?;
                        if t.dims() != shape {
                            return Err(Error::Load {
                                path: path.to_path_buf(),
                                msg: format!("{key} has shape {:?}, expected {shape:?}", t.dims()),
                            });
                        }
                        Ok(t.to_dtype(DType::F32)?)
                    };
                    Layer::Conv { weight: fetch("weight", &[cout, cin, 3, 3])?, bias: fetch("bias", &[cout])? }
                }
                None => Layer::Pool,
            });
        }
        Ok(Self { layers, tap, source: FeatureSource::File { path: path.to_path_buf(), sha256 } })
    }

    pub fn tap(&self) -> usize {
        self.tap
    }

    pub fn source(&self) -> &FeatureSource {
        &self.source
    }

    /// Output channels and spatial downscale factor at the tap.
    pub fn output_geometry(&self) -> (usize, usize) {
        let mut ch = 3;
        let mut scale = 1;
        for l in &self.layers {
            match l {
                Layer::Conv { weight, .. } => ch = weight.dims()[0],
                Layer::Pool => scale *= 2,
            }
        }
        (ch, scale)
    }
}

impl FeatureMap for Vgg16Features {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let dtype = x.dtype();
        let dev = x.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, dev)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let unit = ((x + 1.0)? * 0.5)?;
        let mut h = unit.broadcast_sub(&mean)?.broadcast_div(&std)?;
        for l in &self.layers {
            h = match l {
                Layer::Conv { weight, bias } => {
                    let (w, b) = (weight.to_dtype(dtype)?, bias.to_dtype(dtype)?);
                    let c = b.dim(0)?;
                    conv2d(&h, &w, 1, 1)?.broadcast_add(&b.reshape((1, c, 1, 1))?)?.relu()?
                }
                Layer::Pool => h.max_pool2d(2)?,
            };
        }
        Ok(h)
    }
}
