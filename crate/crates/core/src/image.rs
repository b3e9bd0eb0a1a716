//! Raster images with intensities in `[0, 1]` and the pixel-level utilities
//! shared by sketch extraction, hint synthesis and the dataset builder.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// An `height × width × channels` image stored row-major with interleaved
/// channels. Every intensity lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Axis-aligned square region of a source image, in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Param(format!("image must be non-empty, got {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Param(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image from values that may stray outside `[0, 1]`; they are clamped.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        debug_assert!((0.0..=1.0).contains(&v));
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_size(&self, other: &RasterImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Luminance `0.299 R + 0.587 G + 0.114 B`; single-channel input is returned as is.
    pub fn to_grayscale(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| {
                let l = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                l.clamp(0.0, 1.0) as f32
            })
            .collect();
        RasterImage { height: self.height, width: self.width, channels: 1, data }
    }

    /// Copies a single-channel image into all three RGB channels.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage { height: self.height, width: self.width, channels: 3, data }
    }

    /// One `f64` plane per channel, for filters that need extra precision.
    pub(crate) fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels)
            .map(|c| self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).collect())
            .collect()
    }

    pub(crate) fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0f32; height * width * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<RasterImage> {
        if y0 + height > self.height || x0 + width > self.width || height == 0 || width == 0 {
            return Err(Error::Param(format!(
                "crop {height}x{width}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(RasterImage { height, width, channels: self.channels, data })
    }

    /// Bilinear resampling with half-pixel centers; same-size resizes are exact copies.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<RasterImage> {
        if height == 0 || width == 0 {
            return Err(Error::Param("resize target must be non-empty".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let axis = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let cols: Vec<_> = (0..width).map(|x| axis(x, sx, self.width)).collect();
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for &(x0, x1, fx) in &cols {
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) as f64 * (1.0 - fx) + self.get(y0, x1, c) as f64 * fx;
                    let bot = self.get(y1, x0, c) as f64 * (1.0 - fx) + self.get(y1, x1, c) as f64 * fx;
                    data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32);
                }
            }
        }
        Ok(RasterImage { height, width, channels: self.channels, data })
    }

    pub fn decode_png(bytes: &[u8]) -> Result<RasterImage> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RasterImage> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Load { path: path.to_path_buf(), msg: e.to_string() })?;
        Ok(Self::from_dynamic(&img))
    }

    fn from_dynamic(img: &DynamicImage) -> RasterImage {
        let (width, height) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let buf = img.to_rgb32f();
            let data = buf.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            RasterImage { height, width, channels: 3, data }
        } else {
            let buf = img.to_luma32f();
            let data = buf.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            RasterImage { height, width, channels: 1, data }
        }
    }

    fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// 8-bit PNG encoding (grayscale or RGB to match the channel count).
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let (w, h) = (self.width as u32, self.height as u32);
        let mut out = Cursor::new(Vec::new());
        if self.channels == 1 {
            let buf: ImageBuffer<Luma<u8>, _> =
                ImageBuffer::from_raw(w, h, self.quantized()).expect("buffer size matches dims");
            buf.write_to(&mut out, ImageFormat::Png)?;
        } else {
            let buf: ImageBuffer<Rgb<u8>, _> =
                ImageBuffer::from_raw(w, h, self.quantized()).expect("buffer size matches dims");
            buf.write_to(&mut out, ImageFormat::Png)?;
        }
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(io_err(path))
    }
}

/// Largest centered square inside a `height × width` frame.
pub fn center_square(height: usize, width: usize) -> CropBox {
    let size = height.min(width);
    CropBox { x: (width - size) / 2, y: (height - size) / 2, size }
}

/// Center-crops to the largest square and resizes it to `size × size`.
pub fn square_crop_resize(image: &RasterImage, size: usize) -> Result<RasterImage> {
    if size == 0 {
        return Err(Error::Param("target size must be >= 1".into()));
    }
    let b = center_square(image.height(), image.width());
    image.crop(b.y, b.x, b.size, b.size)?.resize_bilinear(size, size)
}

/// Sampled, normalized 1-D Gaussian with radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror index into `[0, len)`, repeating the edge sample (`-1 -> 0`, `len -> len-1`).
#[inline]
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub(crate) fn blur_plane(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f64; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x as isize + j as isize - r, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0f64; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + j as isize - r, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with kernel radius `ceil(3 sigma)` and mirrored borders.
pub fn gaussian_blur(image: &RasterImage, sigma: f64) -> Result<RasterImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let planes: Vec<_> = image.planes().iter().map(|p| blur_plane(p, h, w, sigma)).collect();
    RasterImage::from_planes(h, w, &planes)
}
