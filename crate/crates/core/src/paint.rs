//! Inference: sketch plus optional scribbles through a trained generator.

use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{image_to_tensor, tensor_to_image};
use crate::error::{io_err, Error, Result};
use crate::hints::{rasterize_user_scribbles, Scribble};
use crate::image::{center_square, CropBox, RasterImage};
use crate::nn::checkpoint;
use crate::nn::{config_hash, DiscriminatorConfig, Generator, GeneratorConfig, Mode, ParamSet};
use crate::train::STATE_KIND;

/// Checkpoint kind for a standalone generator.
pub const GENERATOR_KIND: &str = "generator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub checkpoint_kind: String,
    pub step: Option<u64>,
    pub generator: GeneratorConfig,
    pub parameters: usize,
}

/// A painted image and the square of the input sketch it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct PaintOutput {
    pub image: RasterImage,
    pub crop: CropBox,
}

/// Read-only generator for inference; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Painter {
    generator: Generator,
    summary: ModelSummary,
}

impl Painter {
    pub fn new(generator: Generator, model_id: impl Into<String>) -> Self {
        let summary = ModelSummary {
            model_id: model_id.into(),
            checkpoint_kind: GENERATOR_KIND.into(),
            step: None,
            generator: generator.config().clone(),
            parameters: generator.params().num_scalars(),
        };
        Self { generator, summary }
    }

    /// Loads a training-state or generator checkpoint directory. The model id
    /// is a prefix of the tensor blob's SHA-256.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let ck = checkpoint::load(dir)?;
        let m = &ck.manifest;
        let (config, expected_hash, tensors) = match m.kind.as_str() {
            STATE_KIND => {
                let g: GeneratorConfig = serde_json::from_value(m.config["generator"].clone())
                    .map_err(|e| Error::Checkpoint(format!("generator config: {e}")))?;
                let d: DiscriminatorConfig = serde_json::from_value(m.config["discriminator"].clone())
                    .map_err(|e| Error::Checkpoint(format!("discriminator config: {e}")))?;
                let hash = config_hash(&(&g, &d));
                (g, hash, ck.group("generator."))
            }
            GENERATOR_KIND => {
                let g: GeneratorConfig = serde_json::from_value(m.config.clone())
                    .map_err(|e| Error::Checkpoint(format!("generator config: {e}")))?;
                let hash = config_hash(&g);
                (g, hash, ck.tensors.clone())
            }
            other => return Err(Error::Checkpoint(format!("cannot paint with a {other:?} checkpoint"))),
        };
        if m.config_hash != expected_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: manifest {} vs recomputed {expected_hash}",
                m.config_hash
            )));
        }
        let generator = Generator::build(config.clone(), 0)?;
        generator.params().assign_from(&tensors)?;
        let blob_path = dir.join(checkpoint::BLOB_FILE);
        let blob = std::fs::read(&blob_path).map_err(io_err(&blob_path))?;
        let model_id = hex::encode(&Sha256::digest(&blob)[..8]);
        let summary = ModelSummary {
            model_id,
            checkpoint_kind: m.kind.clone(),
            step: m.meta.get("step").and_then(|s| s.as_u64()),
            parameters: generator.params().num_scalars(),
            generator: config,
        };
        Ok(Self { generator, summary })
    }

    /// Writes the generator alone as a checkpoint directory.
    pub fn save_generator(generator: &Generator, dir: impl AsRef<Path>) -> Result<()> {
        let cfg = generator.config();
        checkpoint::save(
            dir,
            GENERATOR_KIND,
            serde_json::to_value(cfg)?,
            &config_hash(cfg),
            serde_json::Value::Null,
            &generator.params().to_host()?,
        )
    }

    pub fn summary(&self) -> &ModelSummary {
        &self.summary
    }

    pub fn resolution(&self) -> usize {
        self.generator.config().resolution
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    /// The center square of `sketch` at model resolution, and where it came from.
    pub fn prepare_sketch(&self, sketch: &RasterImage) -> Result<(RasterImage, CropBox)> {
        if !matches!(sketch.channels(), 1 | 3) {
            return Err(Error::Param(format!("sketch must have 1 or 3 channels, got {}", sketch.channels())));
        }
        let crop = center_square(sketch.height(), sketch.width());
        let r = self.resolution();
        let square = sketch.crop(crop.y, crop.x, crop.size, crop.size)?.resize_bilinear(r, r)?;
        Ok((square, crop))
    }

    /// Noise plane for `seed`, or zeros.
    pub fn noise_plane(&self, seed: Option<u64>) -> Result<Tensor> {
        let cfg = self.generator.config();
        let r = cfg.resolution;
        let values = match seed {
            Some(s) if cfg.noise_stddev > 0.0 => {
                let dist = Normal::new(0.0f32, cfg.noise_stddev as f32).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                (0..r * r).map(|_| dist.sample(&mut rng)).collect()
            }
            _ => vec![0f32; r * r],
        };
        Ok(Tensor::from_vec(values, (1, 1, r, r), &Device::Cpu)?)
    }

    /// Generator input `(1, 4, R, R)`. Scribble coordinates are in model-resolution pixels.
    pub fn input_tensor(&self, square: &RasterImage, scribbles: &[Scribble], seed: Option<u64>) -> Result<Tensor> {
        let hint = rasterize_user_scribbles(square, scribbles)?;
        let rgb = image_to_tensor(&hint.image)?.unsqueeze(0)?;
        Ok(Tensor::cat(&[&rgb, &self.noise_plane(seed)?], 1)?)
    }

    pub fn paint(&self, sketch: &RasterImage, scribbles: &[Scribble], seed: Option<u64>) -> Result<PaintOutput> {
        let (square, crop) = self.prepare_sketch(sketch)?;
        let input = self.input_tensor(&square, scribbles, seed)?;
        let out = self.generator.forward(&input, Mode::Eval)?;
        let image = tensor_to_image(&out.squeeze(0)?)?;
        let image = if crop.size == image.height() { image } else { image.resize_bilinear(crop.size, crop.size)? };
        Ok(PaintOutput { image, crop })
    }

    /// PNG in, PNG out.
    pub fn paint_png(&self, sketch_png: &[u8], scribbles: &[Scribble], seed: Option<u64>) -> Result<(Vec<u8>, CropBox)> {
        let sketch = RasterImage::decode_png(sketch_png)
            .map_err(|e| Error::Param(format!("sketch does not decode: {e}")))?;
        let out = self.paint(&sketch, scribbles, seed)?;
        Ok((out.image.encode_png()?, out.crop))
    }
}

/// Parameters of a checkpoint's generator, for callers that only need weights.
pub fn load_generator_params(dir: impl AsRef<Path>) -> Result<ParamSet> {
    Ok(Painter::load(dir)?.generator.params().clone())
}
