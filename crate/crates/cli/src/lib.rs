//! `toonpaint` command-line tools.

pub mod service;

use std::collections::HashMap;
use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use toonpaint_core::dataset::{build_pairs, split, BuildOptions, DEFAULT_TRAIN_FRACTION};
use toonpaint_core::eval::{ingest_votes, read_vote_records, summarize, VarianceKind, VoteTally};
use toonpaint_core::hints::{parse_scribbles, synthesize_hints, BlockGrowthParams, Scribble};
use toonpaint_core::image::RasterImage;
use toonpaint_core::sketch::{xdog, XdogParams, DEFAULT_GAMMAS};
use toonpaint_core::train::{calibrate, TrainConfig, TrainState};
use toonpaint_core::{load_batch, DatasetManifest, Painter};

/// Interactive latency goal for one paint.
pub const LATENCY_TARGET: Duration = Duration::from_secs(1);

#[derive(Debug, Parser)]
#[command(name = "toonpaint", version, about = "Sketch-to-cartoon painting with a conditional GAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a color image to an XDoG line sketch.
    ExtractSketch(ExtractSketchArgs),
    /// Paint grown color blocks from targets onto matching sketches.
    MakeHints(MakeHintsArgs),
    /// Build paired training data and the train/test manifests.
    BuildDataset(BuildDatasetArgs),
    /// Train the generator and discriminator from a TOML config.
    Train(TrainArgs),
    /// Popularity report from best/worst vote records or tallies.
    EvaluateVotes(EvaluateVotesArgs),
    /// Paint one sketch with a trained checkpoint.
    Paint(PaintArgs),
    /// Run the HTTP painting service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct XdogArgs {
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.6)]
    pub k: f64,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 200.0)]
    pub phi: f64,
}

impl XdogArgs {
    fn params(&self, gamma: f64) -> XdogParams {
        XdogParams { gamma, sigma: self.sigma, k: self.k, epsilon: self.epsilon, phi: self.phi }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GrowthArgs {
    #[arg(long, default_value_t = 8.0)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = 2)]
    pub min_blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub max_blocks: usize,
    #[arg(long, default_value_t = 12)]
    pub block_side: usize,
    #[arg(long, default_value_t = 12)]
    pub step: usize,
    /// Largest RGB distance from the running block mean that still grows the block.
    #[arg(long, visible_alias = "tau", default_value_t = 0.12)]
    pub threshold: f64,
    #[arg(long, default_value_t = 6)]
    pub max_steps: usize,
}

impl GrowthArgs {
    fn params(&self) -> BlockGrowthParams {
        BlockGrowthParams {
            blur_sigma: self.blur_sigma,
            min_blocks: self.min_blocks,
            max_blocks: self.max_blocks,
            block_side: self.block_side,
            step: self.step,
            threshold: self.threshold,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExtractSketchArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.98)]
    pub gamma: f64,
    #[command(flatten)]
    pub xdog: XdogArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MakeHintsArgs {
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub sketches: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub growth: GrowthArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GAMMAS.to_vec())]
    pub gammas: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_hints: bool,
    #[command(flatten)]
    pub xdog: XdogArgs,
    #[command(flatten)]
    pub growth: GrowthArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a training-state checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print per-term loss magnitudes on the first batch and exit.
    #[arg(long)]
    pub calibrate: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateVotesArgs {
    /// Line-delimited JSON `{voter_id, image_id, best, worst}` records.
    #[arg(long, conflicts_with = "tallies", required_unless_present = "tallies")]
    pub records: Option<PathBuf>,
    /// Line-delimited JSON `{image_id, algorithm_id, n_like, n_dislike}` tallies.
    #[arg(long)]
    pub tallies: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long)]
    pub sample_variance: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PaintArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub sketch: PathBuf,
    #[arg(long)]
    pub scribbles: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Time repeated paints and report latency against the one-second target.
    #[arg(long)]
    pub bench: bool,
    #[arg(long, default_value_t = 10)]
    pub bench_runs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::ExtractSketch(a) => extract_sketch(&a),
        Command::MakeHints(a) => make_hints(&a).map(|n| println!("wrote {n} hint images to {}", a.out.display())),
        Command::BuildDataset(a) => build_dataset(&a).map(|s| println!("{s}")),
        Command::Train(a) => train_cmd(&a),
        Command::EvaluateVotes(a) => evaluate_votes(&a).map(|s| print!("{s}")),
        Command::Paint(a) => paint_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
    }
}

pub fn extract_sketch(a: &ExtractSketchArgs) -> anyhow::Result<()> {
    let img = RasterImage::load(&a.input)?;
    let sketch = xdog(&img, &a.xdog.params(a.gamma))?;
    sketch.save_png(&a.out)?;
    Ok(())
}

fn image_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Pairs each sketch with the target of the same stem, or else the stem before
/// its last `_` (so `cat_g0.98.png` pairs with `cat.png`). Returns hints written.
pub fn make_hints(a: &MakeHintsArgs) -> anyhow::Result<usize> {
    let params = a.growth.params();
    params.validate()?;
    let targets: HashMap<String, PathBuf> = image_files(&a.targets)?.into_iter().map(|p| (stem(&p), p)).collect();
    fs::create_dir_all(&a.out)?;
    let mut written = 0;
    for (i, sketch_path) in image_files(&a.sketches)?.into_iter().enumerate() {
        let s = stem(&sketch_path);
        let target_path = targets
            .get(&s)
            .or_else(|| s.rsplit_once('_').and_then(|(base, _)| targets.get(base)))
            .ok_or_else(|| anyhow!("no target matches sketch {}", sketch_path.display()))?;
        let sketch = RasterImage::load(&sketch_path)?.to_grayscale();
        let target = RasterImage::load(target_path)?.to_rgb();
        let hint = synthesize_hints(&target, &sketch, &params, a.seed.wrapping_add(i as u64))
            .with_context(|| format!("hints for {}", sketch_path.display()))?;
        hint.image.save_png(a.out.join(format!("{s}.png")))?;
        written += 1;
    }
    Ok(written)
}

pub fn build_dataset(a: &BuildDatasetArgs) -> anyhow::Result<String> {
    let opts = BuildOptions {
        image_dir: a.images.clone(),
        out_dir: a.out.clone(),
        size: a.size,
        gammas: a.gammas.clone(),
        xdog: a.xdog.params(0.98),
        hints: if a.no_hints { None } else { Some(a.growth.params()) },
        seed: a.seed,
    };
    let report = build_pairs(&opts)?;
    for (path, why) in &report.skipped {
        eprintln!("skipped {}: {why}", path.display());
    }
    let (train, test) = split(&report.manifest, a.train_frac, a.seed)?;
    train.write(a.out.join("train.manifest.jsonl"))?;
    test.write(a.out.join("test.manifest.jsonl"))?;
    Ok(format!(
        "{} pairs from {} sources ({} skipped): {} train, {} test",
        report.manifest.len(),
        report.manifest.source_ids().len(),
        report.skipped.len(),
        train.len(),
        test.len()
    ))
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let config = TrainConfig::load(&a.config)?;
    if a.calibrate {
        let manifest = DatasetManifest::read(&config.train_manifest)?;
        let n = config.batch_size().min(manifest.len());
        let batch = load_batch(&manifest, &(0..n).collect::<Vec<_>>())?;
        let (features, _) = config.features.build()?;
        let mut state = match &a.resume {
            Some(dir) => TrainState::load(dir, &config)?,
            None => TrainState::new(&config)?,
        };
        let c = calibrate(&mut state, &batch, &config, features.as_ref())?;
        println!("term          raw          weighted");
        for (name, raw, w) in [
            ("pixel", c.raw.pixel, c.weighted.pixel),
            ("feature", c.raw.feature, c.weighted.feature),
            ("adversarial", c.raw.adversarial, c.weighted.adversarial),
            ("tv", c.raw.tv, c.weighted.tv),
        ] {
            println!("{name:<12} {raw:>12.6} {w:>12.6}");
        }
        return Ok(());
    }
    let outcome = toonpaint_core::train(&config, a.resume.as_deref())?;
    if let Some(m) = outcome.metrics.last() {
        println!(
            "step {}: L_p {:.4} L_f {:.4} L_G {:.4} L_tv {:.4} L_D {:.4}",
            m.step, m.l_p, m.l_f, m.l_g, m.l_tv, m.l_d
        );
    }
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct VotesReport {
    #[serde(flatten)]
    report: toonpaint_core::PopReport,
    rejected_records: usize,
}

fn read_tallies(path: &Path) -> anyhow::Result<Vec<VoteTally>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Table followed by the JSON report.
pub fn evaluate_votes(a: &EvaluateVotesArgs) -> anyhow::Result<String> {
    let (tallies, rejected) = match (&a.records, &a.tallies) {
        (Some(path), _) => {
            let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let records = read_vote_records(BufReader::new(f))?;
            let book = ingest_votes(&records);
            (book.tallies(), book.rejected)
        }
        (None, Some(path)) => (read_tallies(path)?, 0),
        (None, None) => bail!("give --records or --tallies"),
    };
    if tallies.is_empty() {
        bail!("no votes to summarize");
    }
    let variance = if a.sample_variance { VarianceKind::Sample } else { VarianceKind::Population };
    let report = summarize(&tallies, a.c, variance)?;
    let table = report.to_table();
    let json = serde_json::to_string_pretty(&VotesReport { report, rejected_records: rejected })?;
    if let Some(p) = &a.json_out {
        fs::write(p, &json)?;
    }
    let mut out = table;
    if rejected > 0 {
        out.push_str(&format!("rejected records: {rejected}\n"));
    }
    out.push_str(&json);
    out.push('\n');
    Ok(out)
}

pub fn read_scribbles(path: Option<&Path>) -> anyhow::Result<Vec<Scribble>> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(parse_scribbles(&text)?)
        }
        None => Ok(Vec::new()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchReport {
    pub runs: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub target_ms: f64,
    pub within_target: bool,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "paint latency over {} runs: mean {:.1} ms, min {:.1} ms, max {:.1} ms; target {:.0} ms: {}",
            self.runs,
            self.mean_ms,
            self.min_ms,
            self.max_ms,
            self.target_ms,
            if self.within_target { "met" } else { "missed" }
        )
    }
}

/// Times `runs` paints (after one warm-up) of the PNG-to-PNG path.
pub fn bench_paint(
    painter: &Painter,
    sketch_png: &[u8],
    scribbles: &[Scribble],
    seed: Option<u64>,
    runs: usize,
) -> anyhow::Result<BenchReport> {
    let runs = runs.max(1);
    painter.paint_png(sketch_png, scribbles, seed)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        painter.paint_png(sketch_png, scribbles, seed)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    let target_ms = LATENCY_TARGET.as_secs_f64() * 1e3;
    Ok(BenchReport {
        runs,
        mean_ms: mean,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: times.iter().copied().fold(0.0, f64::max),
        target_ms,
        within_target: mean <= target_ms,
    })
}

fn paint_cmd(a: &PaintArgs) -> anyhow::Result<()> {
    let painter = Painter::load(&a.checkpoint)?;
    let sketch = fs::read(&a.sketch).with_context(|| format!("reading {}", a.sketch.display()))?;
    let scribbles = read_scribbles(a.scribbles.as_deref())?;
    let (png, crop) = painter.paint_png(&sketch, &scribbles, a.seed)?;
    fs::write(&a.out, png).with_context(|| format!("writing {}", a.out.display()))?;
    println!("painted crop {} -> {}", service::format_crop(&crop), a.out.display());
    if a.bench {
        println!("{}", bench_paint(&painter, &sketch, &scribbles, a.seed, a.bench_runs)?);
    }
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> anyhow::Result<()> {
    let painter = Arc::new(Painter::load(&a.checkpoint)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad address {}:{}", a.host, a.port))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(painter, addr, a.workers))
}
