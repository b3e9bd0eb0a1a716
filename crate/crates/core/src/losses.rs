//! Training objectives. Images are `(N, C, H, W)` tensors in `[-1, 1]`; every
//! expectation is a mean over batch, channels and pixels (or grid cells).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeatureMap, ProbGrid};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;
/// Added under the square root of the total-variation term.
pub const TV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_p: f64,
    pub w_f: f64,
    #[serde(rename = "w_G")]
    pub w_g: f64,
    pub w_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_p: 100.0, w_f: 1.0, w_g: 1.0, w_tv: 1e-4 }
    }
}

impl LossWeights {
    pub fn new(w_p: f64, w_f: f64, w_g: f64, w_tv: f64) -> Result<Self> {
        let w = Self { w_p, w_f, w_g, w_tv };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_p, self.w_f, self.w_g, self.w_tv];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Param(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Param("at least one loss weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Generator adversarial term: `Saturating` is `mean log(1 - D(x, G(x, z)))`
/// exactly as in the minimax objective; `NonSaturating` is `-mean log D(x, G(x, z))`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLossKind {
    Saturating,
    #[default]
    NonSaturating,
}

fn same_shape(term: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Loss { term, msg: format!("shape {:?} vs {:?}", a.dims(), b.dims()) });
    }
    Ok(())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean absolute difference.
pub fn pixel_loss(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    same_shape("pixel", y, g)?;
    Ok((y - g)?.abs()?.mean_all()?)
}

/// Mean squared difference of the extractor's activations.
pub fn feature_loss(extractor: &dyn FeatureMap, y: &Tensor, g: &Tensor) -> Result<Tensor> {
    same_shape("feature", y, g)?;
    let (fy, fg) = (extractor.features(y)?, extractor.features(g)?);
    Ok((fy - fg)?.sqr()?.mean_all()?)
}

/// Mean over pixels with a right and lower neighbour of
/// `sqrt(dy^2 + dx^2 + TV_EPS)`, per channel.
pub fn tv_loss(g: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = g.dims4().map_err(|e| Error::Loss { term: "tv", msg: e.to_string() })?;
    if h < 2 || w < 2 {
        return Err(Error::Loss { term: "tv", msg: format!("image {h}x{w} is smaller than 2x2") });
    }
    let base = g.narrow(2, 0, h - 1)?.narrow(3, 0, w - 1)?;
    let down = g.narrow(2, 1, h - 1)?.narrow(3, 0, w - 1)?;
    let right = g.narrow(2, 0, h - 1)?.narrow(3, 1, w - 1)?;
    let dy = (down - &base)?.sqr()?;
    let dx = (right - &base)?.sqr()?;
    Ok(((dy + dx)? + TV_EPS)?.sqrt()?.mean_all()?)
}

fn clamped(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

pub fn adversarial_generator_loss(fake: &ProbGrid, kind: GeneratorLossKind) -> Result<Tensor> {
    let p = clamped(fake.tensor())?;
    Ok(match kind {
        GeneratorLossKind::Saturating => p.affine(-1.0, 1.0)?.log()?.mean_all()?,
        GeneratorLossKind::NonSaturating => p.log()?.mean_all()?.neg()?,
    })
}

/// `-(mean log D(x, y) + mean log(1 - D(x, G(x, z))))`.
pub fn discriminator_loss(real: &ProbGrid, fake: &ProbGrid) -> Result<Tensor> {
    same_shape("discriminator", real.tensor(), fake.tensor())?;
    let real_term = clamped(real.tensor())?.log()?.mean_all()?;
    let fake_term = clamped(fake.tensor())?.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((real_term + fake_term)?.neg()?)
}

/// Scalar values of the four generator terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pixel: f64,
    pub feature: f64,
    pub adversarial: f64,
    pub tv: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 4] {
        [("pixel", self.pixel), ("feature", self.feature), ("adversarial", self.adversarial), ("tv", self.tv)]
    }
}

/// `w_p L_p + w_f L_f + w_G L_G + w_tv L_tv`.
pub fn composite_loss(weights: &LossWeights, parts: &LossParts) -> Result<f64> {
    weights.validate()?;
    for (term, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::Loss { term, msg: format!("non-finite value {v}") });
        }
    }
    Ok(weights.w_p * parts.pixel + weights.w_f * parts.feature + weights.w_g * parts.adversarial + weights.w_tv * parts.tv)
}

/// Scalar tensors for the four generator terms, still attached to the graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub pixel: Tensor,
    pub feature: Tensor,
    pub adversarial: Tensor,
    pub tv: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<LossParts> {
        Ok(LossParts {
            pixel: scalar(&self.pixel)?,
            feature: scalar(&self.feature)?,
            adversarial: scalar(&self.adversarial)?,
            tv: scalar(&self.tv)?,
        })
    }

    /// Weighted sum for backpropagation. Terms with weight zero are left out of
    /// the graph entirely, so they contribute nothing to any gradient.
    pub fn weighted(&self, weights: &LossWeights) -> Result<Tensor> {
        weights.validate()?;
        let values = self.values()?;
        composite_loss(weights, &values)?;
        let mut total: Option<Tensor> = None;
        for (w, t) in [
            (weights.w_p, &self.pixel),
            (weights.w_f, &self.feature),
            (weights.w_g, &self.adversarial),
            (weights.w_tv, &self.tv),
        ] {
            if w == 0.0 {
                continue;
            }
            let term = (t * w)?;
            total = Some(match total {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        Ok(total.expect("validated weights have a positive entry"))
    }
}
