//! Color-control hints painted over sketches.
//!
//! At training time, blocks are grown along the `(+1, +1)` diagonal of a blurred
//! target: a block keeps absorbing the next `b × b` patch while that patch's mean
//! color stays within `threshold` (RGB L2) of the running mean of everything the
//! block already covers. At inference time users supply flat-color scribbles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockGrowthParams {
    pub blur_sigma: f64,
    pub min_blocks: usize,
    pub max_blocks: usize,
    pub block_side: usize,
    pub step: usize,
    pub threshold: f64,
    pub max_steps: usize,
}

impl Default for BlockGrowthParams {
    fn default() -> Self {
        Self {
            blur_sigma: 8.0,
            min_blocks: 2,
            max_blocks: 8,
            block_side: 12,
            step: 12,
            threshold: 0.12,
            max_steps: 6,
        }
    }
}

impl BlockGrowthParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_blocks < 1 || self.min_blocks > self.max_blocks {
            return Err(Error::Param(format!(
                "need 1 <= min_blocks <= max_blocks, got {}..{}",
                self.min_blocks, self.max_blocks
            )));
        }
        if self.block_side < 1 || self.step < 1 || self.max_steps < 1 {
            return Err(Error::Param("block_side, step and max_steps must be >= 1".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Param(format!("threshold must be > 0, got {}", self.threshold)));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::Param(format!("blur_sigma must be >= 0, got {}", self.blur_sigma)));
        }
        Ok(())
    }
}

/// Top-left corner of a square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorBlock {
    pub cells: Vec<Anchor>,
    pub side: usize,
    /// Mean blurred color over all covered pixels.
    pub color: [f32; 3],
}

impl ColorBlock {
    /// Marks every covered pixel in a row-major `height × width` mask.
    pub fn mark(&self, mask: &mut [bool], width: usize) {
        for a in &self.cells {
            for y in a.y..a.y + self.side {
                mask[y * width + a.x..y * width + a.x + self.side].fill(true);
            }
        }
    }
}

/// An RGB network input: the sketch with color hints painted on top.
#[derive(Debug, Clone, PartialEq)]
pub struct HintImage {
    pub image: RasterImage,
    /// Painted pixels, row-major.
    pub mask: Vec<bool>,
    pub blocks: Vec<ColorBlock>,
}

impl HintImage {
    /// The RGB-replicated sketch with nothing painted.
    pub fn plain(sketch: &RasterImage) -> Self {
        Self {
            mask: vec![false; sketch.height() * sketch.width()],
            image: sketch.to_rgb(),
            blocks: Vec::new(),
        }
    }
}

fn patch_fits(img: &RasterImage, a: Anchor, side: usize) -> bool {
    a.x + side <= img.width() && a.y + side <= img.height()
}

fn patch_mean(img: &RasterImage, a: Anchor, side: usize) -> [f64; 3] {
    let mut s = [0f64; 3];
    for y in a.y..a.y + side {
        for x in a.x..a.x + side {
            for (c, acc) in s.iter_mut().enumerate() {
                *acc += img.get(y, x, c) as f64;
            }
        }
    }
    let n = (side * side) as f64;
    s.map(|v| v / n)
}

pub(crate) fn rgb_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Grows one block from `seed` along the diagonal of `blurred`.
pub fn grow_block(blurred: &RasterImage, seed: Anchor, params: &BlockGrowthParams) -> Result<ColorBlock> {
    params.validate()?;
    if blurred.channels() != 3 {
        return Err(Error::Param("block growth needs an RGB image".into()));
    }
    let side = params.block_side;
    if !patch_fits(blurred, seed, side) {
        return Err(Error::Param(format!(
            "seed patch {side}x{side} at ({}, {}) outside {}x{} image",
            seed.x,
            seed.y,
            blurred.width(),
            blurred.height()
        )));
    }
    let w = blurred.width();
    let mut covered = vec![false; blurred.height() * w];
    let mut sum = [0f64; 3];
    let mut count = 0usize;
    let mut absorb = |a: Anchor, sum: &mut [f64; 3], count: &mut usize| {
        for y in a.y..a.y + side {
            for x in a.x..a.x + side {
                if !covered[y * w + x] {
                    covered[y * w + x] = true;
                    for (c, acc) in sum.iter_mut().enumerate() {
                        *acc += blurred.get(y, x, c) as f64;
                    }
                    *count += 1;
                }
            }
        }
    };

    let mut cells = vec![seed];
    absorb(seed, &mut sum, &mut count);
    while cells.len() <= params.max_steps {
        let last = cells[cells.len() - 1];
        let next = Anchor { x: last.x + params.step, y: last.y + params.step };
        if !patch_fits(blurred, next, side) {
            break;
        }
        let current = sum.map(|v| v / count as f64);
        if rgb_distance(current, patch_mean(blurred, next, side)) > params.threshold {
            break;
        }
        absorb(next, &mut sum, &mut count);
        cells.push(next);
    }
    let color = sum.map(|v| (v / count as f64) as f32);
    Ok(ColorBlock { cells, side, color })
}

/// Paints a random number of grown blocks, filled with the blurred target's
/// own pixels, over the RGB-replicated sketch. Deterministic in `seed`.
pub fn synthesize_hints(
    target: &RasterImage,
    sketch: &RasterImage,
    params: &BlockGrowthParams,
    seed: u64,
) -> Result<HintImage> {
    params.validate()?;
    if target.channels() != 3 || sketch.channels() != 1 {
        return Err(Error::Param("hints need an RGB target and a single-channel sketch".into()));
    }
    if !target.same_size(sketch) {
        return Err(Error::Param(format!(
            "target {}x{} and sketch {}x{} differ in size",
            target.height(),
            target.width(),
            sketch.height(),
            sketch.width()
        )));
    }
    let (h, w, side) = (target.height(), target.width(), params.block_side);
    if side > h || side > w {
        return Err(Error::Param(format!("block side {side} exceeds image {h}x{w}")));
    }
    let blurred = gaussian_blur(target, params.blur_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(params.min_blocks..=params.max_blocks);
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let seed = Anchor { x: rng.random_range(0..=w - side), y: rng.random_range(0..=h - side) };
        blocks.push(grow_block(&blurred, seed, params)?);
    }

    let mut mask = vec![false; h * w];
    blocks.iter().for_each(|b| b.mark(&mut mask, w));
    let mut image = sketch.to_rgb();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                for c in 0..3 {
                    image.set(y, x, c, blurred.get(y, x, c));
                }
            }
        }
    }
    Ok(HintImage { image, mask, blocks })
}

/// A flat-color brush stroke in pixel coordinates (`[x, y]`, column then row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scribble {
    pub points: Vec<[f64; 2]>,
    #[serde(serialize_with = "ser_hex", deserialize_with = "de_hex")]
    pub color: [f32; 3],
    pub radius: u32,
}

pub fn parse_hex_color(s: &str) -> Result<[f32; 3]> {
    let hex = s.strip_prefix('#').unwrap_or(s);
    if hex.len() != 6 || !hex.is_ascii() {
        return Err(Error::Param(format!("color {s:?} is not #RRGGBB")));
    }
    let mut rgb = [0f32; 3];
    for (i, c) in rgb.iter_mut().enumerate() {
        let v = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Param(format!("color {s:?} is not #RRGGBB")))?;
        *c = v as f32 / 255.0;
    }
    Ok(rgb)
}

pub fn format_hex_color(rgb: [f32; 3]) -> String {
    let b = rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    format!("#{:02X}{:02X}{:02X}", b[0], b[1], b[2])
}

fn ser_hex<S: Serializer>(rgb: &[f32; 3], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_hex_color(*rgb))
}

fn de_hex<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<[f32; 3], D::Error> {
    let s = String::deserialize(d)?;
    parse_hex_color(&s).map_err(serde::de::Error::custom)
}

/// Parses the shared scribble wire format: a JSON array of `{points, color, radius}`.
pub fn parse_scribbles(json: &str) -> Result<Vec<Scribble>> {
    Ok(serde_json::from_str(json)?)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

/// Sweeps each scribble's disk brush along its polyline over the sketch.
/// Later scribbles overwrite earlier ones. Three-channel sketches are used as is.
pub fn rasterize_user_scribbles(sketch: &RasterImage, scribbles: &[Scribble]) -> Result<HintImage> {
    let (h, w) = (sketch.height(), sketch.width());
    for (i, s) in scribbles.iter().enumerate() {
        if s.points.is_empty() {
            return Err(Error::Param(format!("scribble {i} has no points")));
        }
        if let Some(p) = s.points.iter().find(|p| {
            !(p[0] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] >= 0.0 && p[1] <= (h - 1) as f64)
        }) {
            return Err(Error::Param(format!("scribble {i}: point {p:?} outside {w}x{h} image")));
        }
        if s.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Param(format!("scribble {i}: color outside [0, 1]")));
        }
    }

    let mut hint = HintImage::plain(sketch);
    for s in scribbles {
        let r = s.radius as f64;
        let segments: Vec<([f64; 2], [f64; 2])> = if s.points.len() == 1 {
            vec![(s.points[0], s.points[0])]
        } else {
            s.points.windows(2).map(|p| (p[0], p[1])).collect()
        };
        for (a, b) in segments {
            let x0 = (a[0].min(b[0]) - r).floor().max(0.0) as usize;
            let x1 = ((a[0].max(b[0]) + r).ceil() as usize).min(w - 1);
            let y0 = (a[1].min(b[1]) - r).floor().max(0.0) as usize;
            let y1 = ((a[1].max(b[1]) + r).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if segment_distance([x as f64, y as f64], a, b) <= r {
                        for c in 0..3 {
                            hint.image.set(y, x, c, s.color[c]);
                        }
                        hint.mask[y * w + x] = true;
                    }
                }
            }
        }
    }
    Ok(hint)
}
