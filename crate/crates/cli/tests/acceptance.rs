//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use toonpaint_cli::service;
use toonpaint_core::eval::ingest_votes;
use toonpaint_core::hints::{parse_scribbles, Anchor};
use toonpaint_core::image::gaussian_blur;
use toonpaint_core::losses::{
    adversarial_generator_loss, discriminator_loss, feature_loss, pixel_loss, scalar, tv_loss, GeneratorLossKind,
    LossTerms, TV_EPS,
};
use toonpaint_core::nn::checkpoint::BLOB_FILE;
use toonpaint_core::nn::ops::conv2d;
use toonpaint_core::nn::{FeatureMap, Vgg16Features};
use toonpaint_core::train::{train_step, StepMetrics, METRICS_FILE};
use toonpaint_core::{
    build_pairs, composite_loss, grow_block, load_batch, pop_algorithm, split, synthesize_hints, BlockGrowthParams,
    BuildOptions, DatasetManifest, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, LossWeights, Mode, Painter, ProbGrid, RasterImage, TrainConfig, TrainState, VoteRecord, VoteTally, XdogParams,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// SplitMix64 stream for test data.
struct Stream(u64);

impl Stream {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}

fn t64(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
}

fn t32(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.iter().map(|&x| x as f32).collect::<Vec<_>>(), shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

// ---------------------------------------------------------------- 1, 2

const REFERENCE_TOTALS: [(&str, u64, u64, f64); 4] =
    [("A", 249, 1147, -1.524), ("B", 304, 698, -0.829), ("C", 687, 219, 1.140), ("D", 960, 136, 1.948)];

fn popularity() -> Outcome {
    let mut got = Vec::new();
    for (alg, likes, dislikes, expected) in REFERENCE_TOTALS {
        let tally = VoteTally { image_id: "all".into(), algorithm_id: alg.into(), n_like: likes, n_dislike: dislikes };
        let pop = pop_algorithm(&[tally], 1.0).map_err(e)?;
        let oracle = ((likes as f64 + 1.0) / (dislikes as f64 + 1.0)).ln();
        ensure!((pop - oracle).abs() < 1e-12, "{alg}: {pop} differs from ln ratio {oracle}");
        ensure!((pop - expected).abs() <= 1e-3, "{alg}: {pop:.4} vs {expected}");
        got.push(format!("{pop:.3}"));
    }
    Ok(got.join(", "))
}

fn vote_conservation() -> Outcome {
    // Best and worst label sequences with the reference per-algorithm totals,
    // aligned so no record names the same algorithm twice.
    let expand = |order: &[(usize, bool)]| -> Vec<&str> {
        order
            .iter()
            .flat_map(|&(i, like)| {
                let (name, l, d, _) = REFERENCE_TOTALS[i];
                std::iter::repeat_n(name, if like { l } else { d } as usize)
            })
            .collect()
    };
    let best = expand(&[(0, true), (1, true), (2, true), (3, true)]);
    let worst = expand(&[(2, false), (3, false), (0, false), (1, false)]);
    ensure!(best.len() == 2200 && worst.len() == 2200, "label sequences have {} / {}", best.len(), worst.len());
    let mut pairs: Vec<(&str, &str)> = best.into_iter().zip(worst).collect();
    let mut rng = Stream(55);
    for i in (1..pairs.len()).rev() {
        pairs.swap(i, (rng.next() % (i as u64 + 1)) as usize);
    }
    let records: Vec<VoteRecord> = pairs
        .iter()
        .enumerate()
        .map(|(k, (b, w))| VoteRecord {
            voter_id: format!("v{}", k / 40),
            image_id: format!("img{}", k % 40),
            best: b.to_string(),
            worst: w.to_string(),
        })
        .collect();
    let voters: BTreeSet<_> = records.iter().map(|r| &r.voter_id).collect();
    ensure!(voters.len() == 55, "{} voters", voters.len());
    let book = ingest_votes(&records);
    ensure!(book.rejected == 0, "{} records rejected", book.rejected);
    let tallies = book.tallies();
    let likes: u64 = tallies.iter().map(|t| t.n_like).sum();
    let dislikes: u64 = tallies.iter().map(|t| t.n_dislike).sum();
    ensure!(likes == 2200 && dislikes == 2200, "likes {likes}, dislikes {dislikes}");
    for (alg, l, d, expected) in REFERENCE_TOTALS {
        let mine: Vec<VoteTally> = tallies.iter().filter(|t| t.algorithm_id == alg).cloned().collect();
        let (sl, sd) = mine.iter().fold((0, 0), |a, t| (a.0 + t.n_like, a.1 + t.n_dislike));
        ensure!((sl, sd) == (l, d), "{alg}: ({sl}, {sd}) vs ({l}, {d})");
        let pop = pop_algorithm(&mine, 1.0).map_err(e)?;
        ensure!((pop - expected).abs() <= 1e-3, "{alg}: pop {pop} from per-image tallies");
    }
    Ok(format!("{} records, likes {likes}, dislikes {dislikes}", records.len()))
}

// ---------------------------------------------------------------- 3

const S: [usize; 4] = [1, 3, 4, 4];

fn at(c: usize, y: usize, x: usize) -> usize {
    (c * 4 + y) * 4 + x
}

/// 3x3 same-padded convolution followed by tanh, then a 1x1 channel mix.
struct SmoothFeatures {
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl SmoothFeatures {
    fn new(rng: &mut Stream) -> Self {
        Self { w1: rng.vec(4 * 3 * 9, -0.5, 0.5), w2: rng.vec(2 * 4, -0.5, 0.5) }
    }

    fn oracle(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; 4 * 16];
        for o in 0..4 {
            for y in 0..4 {
                for xx in 0..4 {
                    let mut acc = 0.0;
                    for i in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                    acc += self.w1[((o * 3 + i) * 3 + ky) * 3 + kx] * x[at(i, sy as usize, sx as usize)];
                                }
                            }
                        }
                    }
                    h[(o * 4 + y) * 4 + xx] = acc.tanh();
                }
            }
        }
        let mut out = vec![0.0; 2 * 16];
        for o in 0..2 {
            for p in 0..16 {
                out[o * 16 + p] = (0..4).map(|i| self.w2[o * 4 + i] * h[i * 16 + p]).sum();
            }
        }
        out
    }
}

impl FeatureMap for SmoothFeatures {
    fn features(&self, x: &Tensor) -> toonpaint_core::Result<Tensor> {
        let h = conv2d(x, &t64(&self.w1, &[4, 3, 3, 3]), 1, 1)?.tanh()?;
        Ok(conv2d(&h, &t64(&self.w2, &[2, 4, 1, 1]), 1, 0)?)
    }
}

/// Target and generated images whose elementwise gaps stay away from zero.
fn separated_pair(rng: &mut Stream) -> (Vec<f64>, Vec<f64>) {
    let y = rng.vec(48, -1.0, 1.0);
    let g = y.iter().map(|v| if rng.next() % 2 == 0 { v + rng.uniform(0.05, 0.5) } else { v - rng.uniform(0.05, 0.5) }).collect();
    (y, g)
}

fn tv_oracle(g: &[f64]) -> f64 {
    let mut sum = 0.0;
    for c in 0..3 {
        for y in 0..3 {
            for x in 0..3 {
                let dy = g[at(c, y + 1, x)] - g[at(c, y, x)];
                let dx = g[at(c, y, x + 1)] - g[at(c, y, x)];
                sum += (dy * dy + dx * dx + TV_EPS).sqrt();
            }
        }
    }
    sum / 27.0
}

/// Largest relative gap between autograd and central differences with h = 1e-3.
fn gradient_gap(x0: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    const H: f64 = 1e-3;
    let var = Var::from_tensor(&t64(x0, shape)).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = values(grads.get(var.as_tensor()).unwrap());
    let eval = |v: &[f64]| scalar(&f(&t64(v, shape))).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let (mut plus, mut minus) = (x0.to_vec(), x0.to_vec());
        plus[i] += H;
        minus[i] -= H;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

fn loss_suite() -> Outcome {
    let mut rng = Stream(3);
    let features = SmoothFeatures::new(&mut rng);
    let mut worst_value: f64 = 0.0;
    for _ in 0..10 {
        let (y, g) = separated_pair(&mut rng);
        let (ty, tg) = (t64(&y, &S), t64(&g, &S));
        let l1 = y.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / 48.0;
        let (fy, fg) = (features.oracle(&y), features.oracle(&g));
        let l2 = fy.iter().zip(&fg).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / fy.len() as f64;
        let real = rng.vec(16, 0.01, 0.99);
        let fake = rng.vec(16, 0.01, 0.99);
        let (rg, fk) = (ProbGrid(t64(&real, &[1, 1, 4, 4])), ProbGrid(t64(&fake, &[1, 1, 4, 4])));
        let sat = fake.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 16.0;
        let nonsat = -fake.iter().map(|p| p.ln()).sum::<f64>() / 16.0;
        let d = -(real.iter().map(|p| p.ln()).sum::<f64>() / 16.0) - sat;
        let pairs = [
            ("pixel", scalar(&pixel_loss(&ty, &tg).map_err(e)?).map_err(e)?, l1),
            ("feature", scalar(&feature_loss(&features, &ty, &tg).map_err(e)?).map_err(e)?, l2),
            ("tv", scalar(&tv_loss(&tg).map_err(e)?).map_err(e)?, tv_oracle(&g)),
            (
                "adversarial",
                scalar(&adversarial_generator_loss(&fk, GeneratorLossKind::Saturating).map_err(e)?).map_err(e)?,
                sat,
            ),
            (
                "adversarial/non-saturating",
                scalar(&adversarial_generator_loss(&fk, GeneratorLossKind::NonSaturating).map_err(e)?).map_err(e)?,
                nonsat,
            ),
            ("discriminator", scalar(&discriminator_loss(&rg, &fk).map_err(e)?).map_err(e)?, d),
        ];
        for (name, got, want) in pairs {
            let gap = (got - want).abs();
            ensure!(gap < 1e-6, "{name}: {got} vs oracle {want}");
            worst_value = worst_value.max(gap);
        }
    }
    let tv_const = scalar(&tv_loss(&t64(&[0.3; 48], &S)).map_err(e)?).map_err(e)?;
    ensure!(tv_const <= 1e-4, "tv of a constant image is {tv_const}");

    let (y, g) = separated_pair(&mut rng);
    let ty = t64(&y, &S);
    let real = ProbGrid(t64(&rng.vec(16, 0.05, 0.95), &[1, 1, 4, 4]));
    let fake = rng.vec(16, 0.05, 0.95);
    let fixed_fake = ProbGrid(t64(&fake, &[1, 1, 4, 4]));
    let real_vals = values(real.tensor());
    let checks: Vec<(&str, &[f64], &[usize], Box<dyn Fn(&Tensor) -> Tensor>)> = vec![
        ("pixel", &g, &S, Box::new(|t| pixel_loss(&ty, t).unwrap())),
        ("feature", &g, &S, Box::new(|t| feature_loss(&features, &ty, t).unwrap())),
        ("tv", &g, &S, Box::new(|t| tv_loss(t).unwrap())),
        (
            "adversarial",
            &fake,
            &[1, 1, 4, 4],
            Box::new(|t| adversarial_generator_loss(&ProbGrid(t.clone()), GeneratorLossKind::Saturating).unwrap()),
        ),
        (
            "adversarial/non-saturating",
            &fake,
            &[1, 1, 4, 4],
            Box::new(|t| adversarial_generator_loss(&ProbGrid(t.clone()), GeneratorLossKind::NonSaturating).unwrap()),
        ),
        ("discriminator/fake", &fake, &[1, 1, 4, 4], Box::new(|t| discriminator_loss(&real, &ProbGrid(t.clone())).unwrap())),
        (
            "discriminator/real",
            &real_vals,
            &[1, 1, 4, 4],
            Box::new(|t| discriminator_loss(&ProbGrid(t.clone()), &fixed_fake).unwrap()),
        ),
    ];
    let mut worst_grad: f64 = 0.0;
    for (name, x0, shape, f) in &checks {
        let gap = gradient_gap(x0, shape, f.as_ref());
        ensure!(gap < 1e-3, "{name} gradient: relative gap {gap:.2e}");
        worst_grad = worst_grad.max(gap);
    }
    Ok(format!("max value gap {worst_value:.1e}, tv(const) {tv_const:.1e}, max gradient rel gap {worst_grad:.1e}"))
}

// ---------------------------------------------------------------- 4

fn grads_of(total: &Tensor, g: &Generator) -> Vec<Vec<f64>> {
    let grads = total.backward().unwrap();
    g.params().iter().map(|(_, v)| grads.get(v.as_tensor()).map(values).unwrap_or_default()).collect()
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn composite_ablation() -> Outcome {
    let r = 64;
    let gcfg = GeneratorConfig { base_filters: 8, ..GeneratorConfig::for_resolution(r) };
    let g = Generator::build(gcfg, 1).map_err(e)?;
    let d = Discriminator::build(DiscriminatorConfig { base_filters: 8, ..DiscriminatorConfig::for_resolution(r) }, 2)
        .map_err(e)?;
    let vgg = Vgg16Features::random(4, 3).map_err(e)?;
    let mut rng = Stream(4);
    let x = t32(&rng.vec(3 * r * r, -1.0, 1.0), &[1, 3, r, r]);
    let target = t32(&rng.vec(3 * r * r, -1.0, 1.0), &[1, 3, r, r]);
    let input = Tensor::cat(&[&x, &t32(&rng.vec(r * r, -0.1, 0.1), &[1, 1, r, r])], 1).map_err(e)?;
    let terms = || -> LossTerms {
        let fake = g.forward(&input, Mode::Train).unwrap();
        LossTerms {
            pixel: pixel_loss(&target, &fake).unwrap(),
            feature: feature_loss(&vgg, &target, &fake).unwrap(),
            adversarial: adversarial_generator_loss(&d.forward(&x, &fake, Mode::Eval).unwrap(), GeneratorLossKind::default())
                .unwrap(),
            tv: tv_loss(&fake).unwrap(),
        }
    };

    let only_pixel = LossWeights::new(1.0, 0.0, 0.0, 0.0).map_err(e)?;
    let t = terms();
    let parts = t.values().map_err(e)?;
    let total = scalar(&t.weighted(&only_pixel).map_err(e)?).map_err(e)?;
    ensure!(total == parts.pixel, "weighted total {total} vs pixel {}", parts.pixel);
    ensure!(composite_loss(&only_pixel, &parts).map_err(e)? == parts.pixel, "composite_loss differs from pixel");
    let bare = grads_of(&t.weighted(&only_pixel).map_err(e)?, &g);
    let direct = grads_of(&terms().pixel, &g);
    ensure!(max_gap(&bare, &direct) == 0.0, "(1,0,0,0) gradient differs from pixel_loss gradient");

    // For each weight set to zero, the total's gradient equals the gradient of
    // the remaining weighted terms assembled by hand.
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for k in 0..4 {
        let mut wk = [w.w_p, w.w_f, w.w_g, w.w_tv];
        wk[k] = 0.0;
        let zeroed = LossWeights::new(wk[0], wk[1], wk[2], wk[3]).map_err(e)?;
        let via_weights = grads_of(&terms().weighted(&zeroed).map_err(e)?, &g);
        let t = terms();
        let kept: Vec<Tensor> = [&t.pixel, &t.feature, &t.adversarial, &t.tv]
            .into_iter()
            .zip(wk)
            .enumerate()
            .filter(|&(i, _)| i != k)
            .map(|(_, (term, wi))| (term * wi).unwrap())
            .collect();
        let by_hand = kept[1..].iter().fold(kept[0].clone(), |acc, t| (acc + t).unwrap());
        let gap = max_gap(&via_weights, &grads_of(&by_hand, &g));
        ensure!(gap <= 1e-9, "zeroing weight {k}: gradient gap {gap:e}");
        worst = worst.max(gap);
        let full = grads_of(&terms().weighted(&w).map_err(e)?, &g);
        ensure!(max_gap(&full, &via_weights) > 1e-9, "weight {k} has no effect when live");
    }
    let no_tv = LossWeights { w_tv: 0.0, ..w };
    let no_f = LossWeights { w_f: 0.0, ..w };
    ensure!(no_tv.validate().is_ok() && no_f.validate().is_ok(), "ablation weights rejected");
    Ok(format!("(1,0,0,0) exact; max zeroed-term gradient gap {worst:.1e}"))
}

// ---------------------------------------------------------------- 5

fn architecture() -> Outcome {
    let mut notes = Vec::new();
    for r in [64, 128, 512] {
        let cfg = GeneratorConfig::for_resolution(r);
        let g = Generator::build(cfg.clone(), r as u64).map_err(e)?;
        let mut rng = Stream(r as u64);
        let x = t32(&rng.vec(4 * r * r, -1.0, 1.0), &[1, 4, r, r]);
        let (y, trace) = g.forward_traced(&x, Mode::Eval).map_err(e)?;
        ensure!(y.dims() == [1, 3, r, r], "generator at {r}: output {:?}", y.dims());
        let v = values(&y);
        ensure!(v.iter().all(|&p| p > -1.0 && p < 1.0), "generator at {r}: output leaves (-1, 1)");
        ensure!(trace.len() == cfg.depth - 1, "generator at {r}: {} decoder stages traced", trace.len());
        for t in &trace {
            ensure!(
                t.concat_channels == t.decoder_channels + t.encoder_channels
                    && t.decoder_spatial == t.encoder_spatial
                    && t.encoder_channels == cfg.encoder_channels(t.stage)
                    && t.encoder_spatial == (r >> t.stage, r >> t.stage),
                "generator at {r}: skip law broken at stage {}: {t:?}",
                t.stage
            );
        }
        notes.push(format!("G{r} ok"));
    }
    let d = Discriminator::build(DiscriminatorConfig::for_resolution(512), 9).map_err(e)?;
    let mut rng = Stream(9);
    let (c, im) = (t32(&rng.vec(3 * 512 * 512, -1.0, 1.0), &[1, 3, 512, 512]), t32(&rng.vec(3 * 512 * 512, -1.0, 1.0), &[1, 3, 512, 512]));
    let grid = d.forward(&c, &im, Mode::Eval).map_err(e)?;
    ensure!(grid.tensor().dims() == [1, 1, 30, 30], "discriminator at 512 emits {:?}", grid.tensor().dims());
    notes.push("D512 30x30".into());

    let r = 64;
    let g = Generator::build(GeneratorConfig::for_resolution(r), 11).map_err(e)?;
    let d = Discriminator::build(DiscriminatorConfig::for_resolution(r), 12).map_err(e)?;
    let vgg = Vgg16Features::random(4, 13).map_err(e)?;
    let mut rng = Stream(21);
    let x = t32(&rng.vec(2 * 3 * r * r, -1.0, 1.0), &[2, 3, r, r]);
    let target = t32(&rng.vec(2 * 3 * r * r, -1.0, 1.0), &[2, 3, r, r]);
    let noise = t32(&rng.vec(2 * r * r, -0.1, 0.1), &[2, 1, r, r]);
    let fake = g.forward(&Tensor::cat(&[&x, &noise], 1).map_err(e)?, Mode::Train).map_err(e)?;
    let terms = LossTerms {
        pixel: pixel_loss(&target, &fake).map_err(e)?,
        feature: feature_loss(&vgg, &target, &fake).map_err(e)?,
        adversarial: adversarial_generator_loss(&d.forward(&x, &fake, Mode::Eval).map_err(e)?, GeneratorLossKind::default())
            .map_err(e)?,
        tv: tv_loss(&fake).map_err(e)?,
    };
    let gg = terms.weighted(&LossWeights::default()).map_err(e)?.backward().map_err(e)?;
    let real = d.forward(&x, &target, Mode::Train).map_err(e)?;
    let fk = d.forward(&x, &fake.detach(), Mode::Train).map_err(e)?;
    let dg = discriminator_loss(&real, &fk).map_err(e)?.backward().map_err(e)?;
    for (label, params, grads) in [("generator", g.params(), &gg), ("discriminator", d.params(), &dg)] {
        for (name, var) in params.iter() {
            let gr = grads.get(var.as_tensor()).ok_or_else(|| format!("{label} {name}: no gradient"))?;
            ensure!(values(gr).iter().any(|&v| v != 0.0), "{label} {name}: gradient is all zero");
        }
    }
    notes.push(format!("{} + {} parameters with nonzero gradients", g.params().len(), d.params().len()));
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- 6, 7

fn cartoon(i: usize, r: usize) -> RasterImage {
    let mut img = RasterImage::filled(r, r, 3, 0.95).unwrap();
    let (cx, cy) = (20.0 + 8.0 * i as f32, 26.0 + 3.0 * i as f32);
    let body = [[0.9, 0.6, 0.1], [0.2, 0.5, 0.9], [0.8, 0.2, 0.3], [0.3, 0.7, 0.3]][i % 4];
    for y in 0..r {
        for x in 0..r {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            let rgb = if d < 13.0 {
                body
            } else if y > 50 {
                [0.4, 0.3, 0.2]
            } else {
                continue;
            };
            for c in 0..3 {
                img.set(y, x, c, rgb[c]);
            }
        }
    }
    img
}

struct Overfit {
    config: TrainConfig,
    metrics: Vec<StepMetrics>,
    final_checkpoint: PathBuf,
    manifest: PathBuf,
}

fn overfit_data(root: &Path) -> Result<PathBuf, String> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(e)?;
    for i in 0..4 {
        cartoon(i, 64).save_png(images.join(format!("toon{i}.png"))).map_err(e)?;
    }
    let report = build_pairs(&BuildOptions {
        image_dir: images,
        out_dir: root.join("data"),
        size: 64,
        gammas: vec![0.98],
        xdog: XdogParams::default(),
        hints: Some(BlockGrowthParams { block_side: 6, step: 6, ..Default::default() }),
        seed: 1,
    })
    .map_err(e)?;
    ensure!(report.manifest.len() == 4, "{} pairs built", report.manifest.len());
    let path = root.join("data/train.manifest.jsonl");
    report.manifest.write(&path).map_err(e)?;
    Ok(path)
}

fn overfit(root: &Path, slot: &mut Option<Overfit>) -> Outcome {
    let manifest = overfit_data(root)?;
    let config = TrainConfig::new(manifest.clone(), root.join("run"), 64, 500);
    let start = Instant::now();
    let outcome = toonpaint_core::train(&config, None).map_err(e)?;
    let elapsed = start.elapsed();
    let last = *outcome.metrics.last().ok_or("no metrics")?;
    ensure!(outcome.metrics.len() == 500, "{} steps ran", outcome.metrics.len());
    ensure!(
        outcome.metrics.iter().all(|m| [m.l_p, m.l_f, m.l_g, m.l_tv, m.l_d].iter().all(|v| v.is_finite())),
        "non-finite metric during the run"
    );

    // Trained discriminator on the real pairs against a uniform noise image.
    let m = DatasetManifest::read(&manifest).map_err(e)?;
    let batch = load_batch(&m, &[0, 1, 2, 3]).map_err(e)?;
    let d = &outcome.state.discriminator;
    let real = d.forward(&batch.inputs, &batch.targets, Mode::Eval).map_err(e)?.mean().map_err(e)?;
    let mut rng = Stream(6);
    let noise_img = t32(&rng.vec(4 * 3 * 64 * 64, -1.0, 1.0), &[4, 3, 64, 64]);
    let noise = d.forward(&batch.inputs, &noise_img, Mode::Eval).map_err(e)?.mean().map_err(e)?;
    let summary = format!(
        "final L_p {:.4}, D(real) {real:.3} vs D(noise) {noise:.3}, {:.1} min",
        last.l_p,
        elapsed.as_secs_f64() / 60.0
    );
    *slot = Some(Overfit { config, metrics: outcome.metrics, final_checkpoint: outcome.final_checkpoint, manifest });
    ensure!(last.l_p < 0.05, "{summary}: L_p not below 0.05");
    ensure!(real > noise, "{summary}: real pair not scored above noise");
    ensure!(elapsed <= Duration::from_secs(15 * 60), "{summary}: over 15 minutes");
    Ok(summary)
}

fn metric_bits(m: &[StepMetrics]) -> Vec<[u64; 8]> {
    m.iter()
        .map(|m| {
            [m.step, m.l_p.to_bits(), m.l_f.to_bits(), m.l_g.to_bits(), m.l_tv.to_bits(), m.l_d.to_bits(), m.d_real_mean.to_bits(), m.d_fake_mean.to_bits()]
        })
        .collect()
}

fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, String> {
    fs::read_to_string(path)
        .map_err(e)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(e))
        .collect()
}

fn determinism(root: &Path, reference: Option<&Overfit>) -> Outcome {
    let manifest = match reference {
        Some(o) => o.manifest.clone(),
        None => overfit_data(&root.join("fresh"))?,
    };
    let mut config = TrainConfig::new(manifest, root.join("run50"), 64, 50);
    config.checkpoint_every = 25;
    let a = toonpaint_core::train(&config, None).map_err(e)?;
    let a_bits = metric_bits(&a.metrics);
    ensure!(a_bits == metric_bits(&read_metrics(&config.output_dir.join(METRICS_FILE))?), "metrics file differs from returned metrics");
    let other = match reference {
        Some(o) => {
            ensure!(o.config.seed == config.seed, "seed mismatch");
            metric_bits(&o.metrics[..50])
        }
        None => {
            let mut again = config.clone();
            again.output_dir = root.join("run50b");
            metric_bits(&toonpaint_core::train(&again, None).map_err(e)?.metrics)
        }
    };
    ensure!(a_bits == other, "two runs with seed {} disagree within 50 steps", config.seed);

    // Resume from step 25 and compare step 26 onward, then the final weights.
    let k = 25;
    let ck = root.join("run50/checkpoints/step-00000025");
    let mut resumed_cfg = config.clone();
    resumed_cfg.output_dir = root.join("resumed");
    let resumed = toonpaint_core::train(&resumed_cfg, Some(&ck)).map_err(e)?;
    ensure!(resumed.metrics.first().map(|m| m.step) == Some(k + 1), "resume did not start at step {}", k + 1);
    ensure!(metric_bits(&resumed.metrics) == a_bits[k as usize..], "resumed metrics differ from the straight run");
    ensure!(
        resumed.state.generator.params().to_host().map_err(e)? == a.state.generator.params().to_host().map_err(e)?,
        "resumed generator differs from the straight run"
    );
    let mut manual = TrainState::load(&ck, &config).map_err(e)?;
    let m = DatasetManifest::read(&config.train_manifest).map_err(e)?;
    let idx = toonpaint_core::train::batch_indices(config.seed, k, config.batch_size(), m.len());
    let (features, _) = config.features.build().map_err(e)?;
    let step = train_step(&mut manual, &load_batch(&m, &idx).map_err(e)?, &config, features.as_ref()).map_err(e)?;
    ensure!(metric_bits(&[step]) == a_bits[k as usize..k as usize + 1], "manual step {} differs", k + 1);

    // Corruptions: flipped blob byte, truncated blob, edited manifest, missing files.
    let pristine = root.join("run50/checkpoints/step-00000050");
    let corrupt = |name: &str, f: &dyn Fn(&Path)| -> Result<(), String> {
        let dir = root.join(format!("corrupt-{name}"));
        fs::create_dir_all(&dir).map_err(e)?;
        for entry in fs::read_dir(&pristine).map_err(e)? {
            let entry = entry.map_err(e)?;
            fs::copy(entry.path(), dir.join(entry.file_name())).map_err(e)?;
        }
        f(&dir);
        ensure!(TrainState::load(&dir, &config).is_err(), "{name} checkpoint was accepted");
        ensure!(Painter::load(&dir).is_err(), "{name} checkpoint was accepted by the painter");
        fs::remove_dir_all(&dir).map_err(e)?;
        Ok(())
    };
    ensure!(TrainState::load(&pristine, &config).is_ok(), "pristine checkpoint refused");
    corrupt("flipped", &|d| {
        let mut b = fs::read(d.join(BLOB_FILE)).unwrap();
        let mid = b.len() / 2;
        b[mid] ^= 0x40;
        fs::write(d.join(BLOB_FILE), b).unwrap();
    })?;
    corrupt("truncated", &|d| {
        let b = fs::read(d.join(BLOB_FILE)).unwrap();
        fs::write(d.join(BLOB_FILE), &b[..b.len() - 4]).unwrap();
    })?;
    corrupt("manifest", &|d| {
        let p = d.join(toonpaint_core::nn::checkpoint::MANIFEST_FILE);
        fs::write(&p, fs::read_to_string(&p).unwrap().replacen('{', "{{", 1)).unwrap();
    })?;
    corrupt("blob-missing", &|d| fs::remove_file(d.join(BLOB_FILE)).unwrap())?;
    Ok(format!("50 steps bit-identical, resume at {k} exact, 4 corruptions refused"))
}

// ---------------------------------------------------------------- 8

fn gray(h: usize, w: usize, data: Vec<f32>) -> RasterImage {
    RasterImage::new(h, w, 1, data).unwrap()
}

fn blur_oracle(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum::<f64>().powi(2);
    let mirror = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let m = i.rem_euclid(2 * n);
        (if m < n { m } else { 2 * n - 1 - m }) as usize
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += k[(dy + r) as usize] * k[(dx + r) as usize] * img[mirror(y as i64 + dy, h) * w + mirror(x as i64 + dx, w)];
                }
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

fn xdog_oracle(img: &[f64], h: usize, w: usize, p: &XdogParams) -> Vec<f64> {
    let (fine, coarse) = (blur_oracle(img, h, w, p.sigma), blur_oracle(img, h, w, p.k * p.sigma));
    fine.iter()
        .zip(&coarse)
        .map(|(a, b)| {
            let u = a - p.gamma * b;
            if u >= p.epsilon { 1.0 } else { (1.0 + (p.phi * (u - p.epsilon)).tanh()).clamp(0.0, 1.0) }
        })
        .collect()
}

fn smooth_rgb(h: usize, w: usize, seed: u64) -> RasterImage {
    let t = (seed % 97) as f32 * 0.01;
    let mut img = RasterImage::filled(h, w, 3, 0.0).unwrap();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = 0.5 + 0.4 * ((x as f32 * 0.05 + t * (c + 1) as f32).sin() * (y as f32 * 0.04 + t).cos());
                img.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn xdog_checks() -> Result<String, String> {
    let mut rng = Stream(8);
    for trial in 0..20 {
        let gamma = rng.uniform(0.9, 0.99);
        let p = XdogParams::default().with_gamma(gamma);
        let data: Vec<f32> = (0..20 * 16).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
        let out = toonpaint_core::xdog(&gray(20, 16, data.clone()), &p).map_err(e)?;
        ensure!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "trial {trial}: output outside [0, 1]");
        let want = xdog_oracle(&data.iter().map(|&v| v as f64).collect::<Vec<_>>(), 20, 16, &p);
        let gap = out.data().iter().zip(&want).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        ensure!(gap < 1e-5, "trial {trial}: {gap:e} from the convolution oracle");
        let v = rng.uniform(0.0, 1.0) as f32;
        let flat = toonpaint_core::xdog(&gray(12, 12, vec![v; 144]), &p).map_err(e)?;
        ensure!(flat.data().iter().all(|&q| q == flat.data()[0]), "trial {trial}: constant {v} gave a varying output");
    }

    // Vertical step between two levels that both render white on their own:
    // the filter matches the oracle, a dark line hugs the edge and every
    // column beyond the filter support equals the flat response.
    let (h, w, edge) = (24, 40, 20);
    let p = XdogParams::default();
    let (left, right) = (1.0f32, 0.6f32);
    let step: Vec<f32> = (0..h * w).map(|i| if i % w < edge { left } else { right }).collect();
    let out = toonpaint_core::xdog(&gray(h, w, step.clone()), &p).map_err(e)?;
    let want = xdog_oracle(&step.iter().map(|&v| v as f64).collect::<Vec<_>>(), h, w, &p);
    let gap = out.data().iter().zip(&want).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    ensure!(gap < 1e-5, "step edge: {gap:e} from the convolution oracle");
    let flat = |v: f32| -> Result<f32, String> { Ok(toonpaint_core::xdog(&gray(8, 8, vec![v; 64]), &p).map_err(e)?.data()[0]) };
    let (flat_left, flat_right) = (flat(left)?, flat(right)?);
    ensure!(flat_left == 1.0 && flat_right == 1.0, "plateaus render {flat_left} / {flat_right}, not white");
    let column = |x: usize| (0..h).map(|y| out.get(y, x, 0) as f64).sum::<f64>() / h as f64;
    let darkest = (0..w).min_by(|&a, &b| column(a).total_cmp(&column(b))).unwrap();
    ensure!(darkest.abs_diff(edge) <= 2, "darkest column {darkest}, edge at {edge}");
    ensure!(column(darkest) < 0.5, "edge response too faint: {}", column(darkest));
    let support = (3.0 * p.k * p.sigma).ceil() as usize + 1;
    for x in (0..w).filter(|x| x.abs_diff(edge) > support) {
        let plateau = if x < edge { flat_left } else { flat_right };
        ensure!((0..h).all(|y| out.get(y, x, 0) == plateau), "column {x} beyond the filter support differs from its plateau");
    }
    Ok(format!("xdog vs oracle {gap:.1e}, edge line at column {darkest}"))
}

fn grow_block_replay() -> Result<(), String> {
    let mut rng = Stream(12);
    for trial in 0..200 {
        let img = smooth_rgb(64, 64, rng.next() % 1000);
        let (x, y) = ((rng.next() % 40) as usize, (rng.next() % 40) as usize);
        let threshold = rng.uniform(0.01, 0.3);
        let max_steps = 1 + (rng.next() % 7) as usize;
        let p = BlockGrowthParams { block_side: 8, step: 6, threshold, max_steps, ..Default::default() };
        let b = grow_block(&img, Anchor { x, y }, &p).map_err(e)?;
        let patch_mean = |a: Anchor| -> [f64; 3] {
            let mut m = [0f64; 3];
            for yy in a.y..a.y + 8 {
                for xx in a.x..a.x + 8 {
                    for (c, mc) in m.iter_mut().enumerate() {
                        *mc += img.get(yy, xx, c) as f64 / 64.0;
                    }
                }
            }
            m
        };
        let dist = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let mut covered = BTreeSet::new();
        let mut sum = [0f64; 3];
        let mut add = |a: Anchor, sum: &mut [f64; 3]| {
            for yy in a.y..a.y + 8 {
                for xx in a.x..a.x + 8 {
                    if covered.insert((yy, xx)) {
                        for (c, s) in sum.iter_mut().enumerate() {
                            *s += img.get(yy, xx, c) as f64;
                        }
                    }
                }
            }
            covered.len()
        };
        let mut n = add(b.cells[0], &mut sum);
        ensure!(b.cells[0] == Anchor { x, y } && b.cells.len() <= max_steps + 1, "trial {trial}: bad cell list");
        for pair in b.cells.windows(2) {
            ensure!(pair[1] == Anchor { x: pair[0].x + 6, y: pair[0].y + 6 }, "trial {trial}: not a diagonal step");
            let d = dist(sum.map(|v| v / n as f64), patch_mean(pair[1]));
            ensure!(d <= threshold, "trial {trial}: grew past tau ({d} > {threshold})");
            n = add(pair[1], &mut sum);
        }
        let last = *b.cells.last().unwrap();
        let next = Anchor { x: last.x + 6, y: last.y + 6 };
        let fits = next.x + 8 <= 64 && next.y + 8 <= 64;
        let mean = sum.map(|v| v / n as f64);
        ensure!(
            b.cells.len() == max_steps + 1 || !fits || dist(mean, patch_mean(next)) > threshold,
            "trial {trial}: stopped although the next cell was within tau"
        );
        ensure!((0..3).all(|c| (b.color[c] as f64 - mean[c]).abs() < 1e-6), "trial {trial}: color is not the covered mean");
    }
    Ok(())
}

fn hint_checks() -> Result<(), String> {
    for seed in 0..20u64 {
        let target = smooth_rgb(48, 48, seed * 13);
        let sketch = toonpaint_core::xdog(&target.to_grayscale(), &XdogParams::default()).map_err(e)?;
        let p = BlockGrowthParams { block_side: 6, step: 6, blur_sigma: 2.0, ..Default::default() };
        let a = synthesize_hints(&target, &sketch, &p, seed).map_err(e)?;
        ensure!(a == synthesize_hints(&target, &sketch, &p, seed).map_err(e)?, "seed {seed}: not reproducible");
        let blurred = gaussian_blur(&target, p.blur_sigma).map_err(e)?;
        let mut mask = vec![false; 48 * 48];
        for b in &a.blocks {
            b.mark(&mut mask, 48);
        }
        ensure!(a.mask == mask, "seed {seed}: mask differs from the union of blocks");
        for y in 0..48 {
            for x in 0..48 {
                for c in 0..3 {
                    let want = if mask[y * 48 + x] { blurred.get(y, x, c) } else { sketch.get(y, x, 0) };
                    ensure!(a.image.get(y, x, c) == want, "seed {seed}: pixel ({y},{x},{c}) altered");
                }
            }
        }
    }
    Ok(())
}

fn split_check(root: &Path) -> Result<String, String> {
    let images = root.join("split-images");
    fs::create_dir_all(&images).map_err(e)?;
    for i in 0..30 {
        smooth_rgb(24, 24, i).save_png(images.join(format!("s{i:02}.png"))).map_err(e)?;
    }
    let report = build_pairs(&BuildOptions {
        image_dir: images,
        out_dir: root.join("split-data"),
        size: 16,
        gammas: vec![0.97, 0.98, 0.99],
        xdog: XdogParams::default(),
        hints: None,
        seed: 2,
    })
    .map_err(e)?;
    for seed in 0..10 {
        let (train, test) = split(&report.manifest, 0.9, seed).map_err(e)?;
        let (a, b) = (train.source_ids(), test.source_ids());
        ensure!(a.is_disjoint(&b), "seed {seed}: sources shared between train and test");
        ensure!((a.len(), b.len()) == (27, 3), "seed {seed}: {} / {} sources", a.len(), b.len());
        ensure!(train.len() + test.len() == 90, "seed {seed}: entries lost");
    }
    Ok("27/3 sources, no leakage".into())
}

fn preprocessing(root: &Path) -> Outcome {
    let x = xdog_checks()?;
    grow_block_replay()?;
    hint_checks()?;
    let s = split_check(root)?;
    Ok(format!("{x}; 200 grow_block replays; 20 hint seeds; {s}"))
}

// ---------------------------------------------------------------- 9

fn sketch_png() -> Vec<u8> {
    let img = toonpaint_core::xdog(&cartoon(2, 64).resize_bilinear(80, 72).unwrap().to_grayscale(), &XdogParams::default()).unwrap();
    img.encode_png().unwrap()
}

async fn post(client: &reqwest::Client, base: &str, png: &[u8], scribbles: &str, seed: &str) -> Result<Vec<u8>, String> {
    let form = reqwest::multipart::Form::new()
        .part("sketch", reqwest::multipart::Part::bytes(png.to_vec()).file_name("sketch.png"))
        .text("scribbles", scribbles.to_string())
        .text("seed", seed.to_string());
    let resp = client.post(format!("{base}/paint")).multipart(form).send().await.map_err(e)?;
    ensure!(resp.status() == 200, "POST /paint returned {}", resp.status());
    Ok(resp.bytes().await.map_err(e)?.to_vec())
}

fn parity(root: &Path, trained: Option<&Overfit>) -> Outcome {
    let checkpoint = match trained {
        Some(o) => o.final_checkpoint.clone(),
        None => {
            let dir = root.join("fallback-model");
            let g = Generator::build(GeneratorConfig::for_resolution(64), 1).map_err(e)?;
            Painter::save_generator(&g, &dir).map_err(e)?;
            dir
        }
    };
    fs::create_dir_all(root).map_err(e)?;
    let painter = Arc::new(Painter::load(&checkpoint).map_err(e)?);
    let png = sketch_png();
    let scribbles_json = r##"[{"points": [[12, 20], [30, 34]], "color": "#D04020", "radius": 3}]"##;
    let scribbles = parse_scribbles(scribbles_json).map_err(e)?;
    let (library, _) = painter.paint_png(&png, &scribbles, Some(42)).map_err(e)?;

    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().map_err(e)?;
    let (single, concurrent) = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(e)?;
        let base = format!("http://{}", listener.local_addr().map_err(e)?);
        let app = service::router(painter.clone(), 4);
        tokio::spawn(async move { axum::serve(listener, app).await });
        let client = reqwest::Client::new();
        let single = post(&client, &base, &png, scribbles_json, "42").await?;
        let tasks: Vec<_> = (0..16)
            .map(|_| {
                let (client, base, png) = (client.clone(), base.clone(), png.clone());
                tokio::spawn(async move { post(&client, &base, &png, scribbles_json, "42").await })
            })
            .collect();
        let mut bodies = Vec::new();
        for t in tasks {
            bodies.push(t.await.map_err(e)??);
        }
        Ok::<_, String>((single, bodies))
    })?;
    ensure!(single == library, "POST /paint bytes differ from paint()");
    ensure!(concurrent.iter().all(|b| *b == library), "concurrent responses differ");

    let sketch_path = root.join("parity-sketch.png");
    let scribble_path = root.join("parity-scribbles.json");
    let out_path = root.join("parity-out.png");
    fs::write(&sketch_path, &png).map_err(e)?;
    fs::write(&scribble_path, scribbles_json).map_err(e)?;
    let out = Command::new(env!("CARGO_BIN_EXE_toonpaint"))
        .arg("paint")
        .arg("--checkpoint")
        .arg(&checkpoint)
        .arg("--sketch")
        .arg(&sketch_path)
        .arg("--scribbles")
        .arg(&scribble_path)
        .args(["--seed", "42", "--bench", "--bench-runs", "3", "--out"])
        .arg(&out_path)
        .output()
        .map_err(e)?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure!(out.status.success(), "paint --bench failed: {}", String::from_utf8_lossy(&out.stderr));
    ensure!(fs::read(&out_path).map_err(e)? == library, "CLI output differs from paint()");
    let bench = stdout.lines().find(|l| l.contains("paint latency")).ok_or("no latency report")?;
    ensure!(bench.contains("target 1000 ms"), "report lacks the 1 s target: {bench}");
    Ok(format!("{} bytes identical across paint(), POST, 16 concurrent, CLI; {bench}", library.len()))
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("AC{n} {name}: PASS ({detail})"),
        Err(why) => {
            *failures += 1;
            println!("AC{n} {name}: FAIL ({why})");
        }
    }
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let root = scratch.path();
    let mut failures = 0;
    report(1, "popularity", popularity(), &mut failures);
    report(2, "vote conservation", vote_conservation(), &mut failures);
    report(3, "loss suite", loss_suite(), &mut failures);
    report(4, "composite ablation", composite_ablation(), &mut failures);
    report(5, "architecture", architecture(), &mut failures);
    let mut trained = None;
    report(6, "desk overfit", overfit(&root.join("overfit"), &mut trained), &mut failures);
    report(7, "determinism and persistence", determinism(&root.join("determinism"), trained.as_ref()), &mut failures);
    report(8, "preprocessing", preprocessing(&root.join("prep")), &mut failures);
    report(9, "cli/service parity", parity(&root.join("parity"), trained.as_ref()), &mut failures);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
