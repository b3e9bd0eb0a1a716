//! Line-art extraction with the thresholded difference-of-Gaussians (XDoG) filter.
//!
//! The response is `U = G_sigma * g - gamma * G_{k sigma} * g` on the grayscale
//! image `g`; pixels with `U >= epsilon` become white background, the rest fall
//! off through `1 + tanh(phi (U - epsilon))`. Raising `gamma` toward 1 keeps more
//! high-frequency detail (more dark pixels).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{blur_plane, RasterImage};

/// Detail levels used when building training pairs.
pub const DEFAULT_GAMMAS: [f64; 4] = [0.96, 0.97, 0.98, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XdogParams {
    pub gamma: f64,
    pub sigma: f64,
    pub k: f64,
    pub epsilon: f64,
    pub phi: f64,
}

impl Default for XdogParams {
    fn default() -> Self {
        Self { gamma: 0.98, sigma: 1.0, k: 1.6, epsilon: 0.01, phi: 200.0 }
    }
}

impl XdogParams {
    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Param(format!("xdog sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.k > 1.0) {
            return Err(Error::Param(format!("xdog k must be > 1, got {}", self.k)));
        }
        if !(self.phi > 0.0) {
            return Err(Error::Param(format!("xdog phi must be > 0, got {}", self.phi)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Param(format!("xdog gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !self.epsilon.is_finite() {
            return Err(Error::Param("xdog epsilon must be finite".into()));
        }
        Ok(())
    }
}

/// Single-channel sketch: white (1.0) background with dark lines.
pub fn xdog(image: &RasterImage, params: &XdogParams) -> Result<RasterImage> {
    params.validate()?;
    let gray = image.to_grayscale();
    let (h, w) = (gray.height(), gray.width());
    let plane = gray.planes().remove(0);
    let fine = blur_plane(&plane, h, w, params.sigma);
    let coarse = blur_plane(&plane, h, w, params.k * params.sigma);
    let out: Vec<f64> = fine
        .iter()
        .zip(&coarse)
        .map(|(a, b)| {
            let u = a - params.gamma * b;
            if u >= params.epsilon {
                1.0
            } else {
                (1.0 + (params.phi * (u - params.epsilon)).tanh()).clamp(0.0, 1.0)
            }
        })
        .collect();
    RasterImage::from_planes(h, w, &[out])
}

/// One sketch per gamma, every other parameter taken from `base`.
pub fn extract_sketch_set(image: &RasterImage, gammas: &[f64], base: &XdogParams) -> Result<Vec<RasterImage>> {
    if gammas.is_empty() {
        return Err(Error::Param("gamma list must not be empty".into()));
    }
    gammas.iter().map(|&g| xdog(image, &base.with_gamma(g))).collect()
}
