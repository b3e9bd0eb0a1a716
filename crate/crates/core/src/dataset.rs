//! Paired training data: square-cropped targets, XDoG sketches at several
//! detail levels, optional color hints, and line-delimited JSON manifests.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::hints::{synthesize_hints, BlockGrowthParams};
use crate::image::{square_crop_resize, RasterImage};
use crate::sketch::{xdog, XdogParams};

pub const DEFAULT_RESOLUTION: usize = 512;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    /// Not yet split.
    All,
    Train,
    Test,
}

/// One (input, target) pair. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    pub source: PathBuf,
    pub sketch: PathBuf,
    pub hint: Option<PathBuf>,
    pub target: PathBuf,
    pub gamma: f64,
    pub resolution: usize,
    pub split: SplitTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub resolution: usize,
    pub split: SplitTag,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.source_id.as_str()).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(io_err(path))
    }

    /// Reads a manifest; its directory becomes the root for entry paths.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::Dataset(format!("{}:{}: {err}", path.display(), i + 1)))?;
            entries.push(e);
        }
        let first = entries.first().ok_or_else(|| Error::Dataset(format!("{} is empty", path.display())))?;
        let (resolution, split) = (first.resolution, first.split);
        if let Some(e) = entries.iter().find(|e| e.resolution != resolution) {
            return Err(Error::Dataset(format!(
                "entry {} has resolution {}, expected {resolution}",
                e.source_id, e.resolution
            )));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, resolution, split, entries })
    }

    fn with_split(&self, split: SplitTag, entries: Vec<ManifestEntry>) -> Self {
        let entries = entries.into_iter().map(|e| ManifestEntry { split, ..e }).collect();
        Self { root: self.root.clone(), resolution: self.resolution, split, entries }
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub image_dir: PathBuf,
    pub out_dir: PathBuf,
    pub size: usize,
    pub gammas: Vec<f64>,
    pub xdog: XdogParams,
    /// `None` disables hints; inputs are then the RGB-replicated sketches.
    pub hints: Option<BlockGrowthParams>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub manifest: DatasetManifest,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

pub(crate) fn gamma_tag(gamma: f64) -> String {
    format!("g{gamma}")
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Unique, filesystem-safe id per source file (stem, de-duplicated in listing order).
fn source_ids(files: &[PathBuf]) -> Vec<String> {
    let mut seen = HashSet::new();
    files
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem: String = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            let mut id = if stem.is_empty() { format!("image{i}") } else { stem };
            if !seen.insert(id.clone()) {
                id = format!("{id}-{i}");
                seen.insert(id.clone());
            }
            id
        })
        .collect()
}

/// Builds every (source, gamma) pair under `out_dir` and returns the unsplit manifest.
pub fn build_pairs(opts: &BuildOptions) -> Result<BuildReport> {
    if opts.gammas.is_empty() {
        return Err(Error::Param("gamma list must not be empty".into()));
    }
    if opts.size == 0 {
        return Err(Error::Param("size must be >= 1".into()));
    }
    for &g in &opts.gammas {
        opts.xdog.with_gamma(g).validate()?;
    }
    if let Some(h) = &opts.hints {
        h.validate()?;
    }
    let files = list_images(&opts.image_dir)?;
    let ids = source_ids(&files);
    for sub in ["targets", "sketches", "hints"] {
        if sub == "hints" && opts.hints.is_none() {
            continue;
        }
        let d = opts.out_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }

    let results: Vec<Result<Vec<ManifestEntry>, (PathBuf, String)>> = files
        .par_iter()
        .zip(ids.par_iter())
        .enumerate()
        .map(|(index, (path, id))| build_source(opts, index, path, id).map_err(|e| (path.clone(), e.to_string())))
        .collect();

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(mut e) => entries.append(&mut e),
            Err((path, msg)) => {
                log::warn!("skipping {}: {msg}", path.display());
                skipped.push((path, msg));
            }
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} of {} files", skipped.len(), files.len());
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable images in {} ({} skipped)",
            opts.image_dir.display(),
            skipped.len()
        )));
    }
    let manifest =
        DatasetManifest { root: opts.out_dir.clone(), resolution: opts.size, split: SplitTag::All, entries };
    Ok(BuildReport { manifest, skipped })
}

fn build_source(opts: &BuildOptions, index: usize, path: &Path, id: &str) -> Result<Vec<ManifestEntry>> {
    let raw = RasterImage::load(path)?;
    let target = square_crop_resize(&raw.to_rgb(), opts.size)?;
    let target_rel = PathBuf::from("targets").join(format!("{id}.png"));
    target.save_png(opts.out_dir.join(&target_rel))?;
    let mut out = Vec::with_capacity(opts.gammas.len());
    for (gi, &gamma) in opts.gammas.iter().enumerate() {
        let sketch = xdog(&target, &opts.xdog.with_gamma(gamma))?;
        let name = format!("{id}_{}.png", gamma_tag(gamma));
        let sketch_rel = PathBuf::from("sketches").join(&name);
        sketch.save_png(opts.out_dir.join(&sketch_rel))?;
        let hint = match &opts.hints {
            Some(params) => {
                let h = synthesize_hints(&target, &sketch, params, mix_seed(opts.seed, index as u64, gi as u64))?;
                let rel = PathBuf::from("hints").join(&name);
                h.image.save_png(opts.out_dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        out.push(ManifestEntry {
            source_id: id.to_string(),
            source: path.to_path_buf(),
            sketch: sketch_rel,
            hint,
            target: target_rel.clone(),
            gamma,
            resolution: opts.size,
            split: SplitTag::All,
        });
    }
    Ok(out)
}

/// Seeded split by source image: every gamma variant of a source lands on the
/// same side. The first `floor(fraction * sources)` shuffled sources train.
pub fn split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Param(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut sources: Vec<&str> = manifest.source_ids().into_iter().collect();
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * sources.len() as f64 + 1e-9).floor() as usize;
    let train_ids: HashSet<&str> = sources[..n_train].iter().copied().collect();
    let (train, test): (Vec<_>, Vec<_>) =
        manifest.entries.iter().cloned().partition(|e| train_ids.contains(e.source_id.as_str()));
    Ok((manifest.with_split(SplitTag::Train, train), manifest.with_split(SplitTag::Test, test)))
}

/// Maps `[0, 1]` to `[-1, 1]`.
pub fn normalize(v: f32) -> f32 {
    2.0 * v - 1.0
}

pub fn denormalize(v: f32) -> f32 {
    (v + 1.0) * 0.5
}

/// `(C, H, W)` tensor in `[-1, 1]`.
pub fn image_to_tensor(img: &RasterImage) -> Result<Tensor> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut planar = vec![0f32; h * w * c];
    for (i, px) in img.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            planar[ch * h * w + i] = normalize(v);
        }
    }
    Ok(Tensor::from_vec(planar, (c, h, w), &Device::Cpu)?)
}

/// Inverse of [`image_to_tensor`] for a `(C, H, W)` tensor; values are clamped.
pub fn tensor_to_image(t: &Tensor) -> Result<RasterImage> {
    let (c, h, w) = t.dims3()?;
    let planar: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let mut data = vec![0f32; h * w * c];
    for ch in 0..c {
        for i in 0..h * w {
            data[i * c + ch] = denormalize(planar[ch * h * w + i]);
        }
    }
    RasterImage::from_clamped(h, w, c, data)
}

/// Stacked, normalized network inputs and targets, each `(N, 3, R, R)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub source_ids: Vec<String>,
}

impl Batch {
    pub fn from_images(pairs: &[(RasterImage, RasterImage)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Param("empty batch".into()));
        }
        let mut inputs = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for (input, target) in pairs {
            if !input.same_size(target) {
                return Err(Error::Shape("input and target sizes differ".into()));
            }
            inputs.push(image_to_tensor(&input.to_rgb())?);
            targets.push(image_to_tensor(&target.to_rgb())?);
        }
        Ok(Self {
            inputs: Tensor::stack(&inputs, 0)?,
            targets: Tensor::stack(&targets, 0)?,
            source_ids: (0..pairs.len()).map(|i| i.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }
}

fn load_entry_image(manifest: &DatasetManifest, entry: &ManifestEntry, rel: &Path) -> Result<RasterImage> {
    let path = manifest.root.join(rel);
    let img = RasterImage::load(&path).map_err(|e| {
        Error::Dataset(format!("entry {} (gamma {}): {e}", entry.source_id, entry.gamma))
    })?;
    if img.height() != manifest.resolution || img.width() != manifest.resolution {
        return Err(Error::Dataset(format!(
            "{} is {}x{}, manifest resolution is {}",
            path.display(),
            img.height(),
            img.width(),
            manifest.resolution
        )));
    }
    Ok(img.to_rgb())
}

/// Decodes and stacks the selected entries.
pub fn load_batch(manifest: &DatasetManifest, indices: &[usize]) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let mut pairs = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for &i in indices {
        let e = manifest
            .entries
            .get(i)
            .ok_or_else(|| Error::Param(format!("index {i} out of range for {} entries", manifest.len())))?;
        let input = load_entry_image(manifest, e, e.hint.as_deref().unwrap_or(&e.sketch))?;
        let target = load_entry_image(manifest, e, &e.target)?;
        pairs.push((input, target));
        ids.push(e.source_id.clone());
    }
    let mut batch = Batch::from_images(&pairs)?;
    batch.source_ids = ids;
    Ok(batch)
}
