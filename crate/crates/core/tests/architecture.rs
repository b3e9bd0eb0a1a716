use candle_core::{DType, Device, Tensor};
use toonpaint_core::losses::{discriminator_loss, LossTerms, LossWeights};
use toonpaint_core::losses::{adversarial_generator_loss, feature_loss, pixel_loss, tv_loss, GeneratorLossKind};
use toonpaint_core::nn::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode, Vgg16Features};

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    // Deterministic pseudo-random values in [-1, 1).
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let v: Vec<f32> = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Independent count from the layer list: conv weights `cout * cin * 16`; a
/// bias on the first encoder, the bottleneck encoder and the output decoder;
/// an affine norm (scale and shift) everywhere else.
fn parameter_count_oracle(depth: usize, base: usize, cin: usize, cout: usize) -> usize {
    let width = |i: usize| (base * 2usize.pow(i as u32 - 1)).min(8 * base);
    let mut total = 0;
    let mut prev = cin;
    for i in 1..=depth {
        total += width(i) * prev * 16;
        total += if i == 1 || i == depth { width(i) } else { 2 * width(i) };
        prev = width(i);
    }
    for i in (1..=depth).rev() {
        let inputs = if i == depth { width(i) } else { 2 * width(i) };
        let outputs = if i == 1 { cout } else { width(i - 1) };
        total += inputs * outputs * 16;
        total += if i == 1 { outputs } else { 2 * outputs };
    }
    total
}

#[test]
fn default_generator_parameter_count() {
    let g = Generator::build(GeneratorConfig::default(), 0).unwrap();
    let expected = parameter_count_oracle(8, 64, 4, 3);
    assert_eq!(g.params().num_scalars(), expected);
    let small = Generator::build(GeneratorConfig { base_filters: 8, ..GeneratorConfig::for_resolution(64) }, 0).unwrap();
    assert_eq!(small.params().num_scalars(), parameter_count_oracle(5, 8, 4, 3));
}

#[test]
fn output_shape_and_range_at_64_and_128() {
    for r in [64, 128] {
        let g = Generator::build(GeneratorConfig::for_resolution(r), 1).unwrap();
        let x = uniform(&[1, 4, r, r], r as u64);
        let y = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dims(), &[1, 3, r, r]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&p| p > -1.0 && p < 1.0));
    }
}

#[test]
fn skip_concatenation_law() {
    for (r, depth) in [(64, 5), (64, 6), (128, 6)] {
        let cfg = GeneratorConfig { resolution: r, depth, base_filters: 8, ..GeneratorConfig::default() };
        let g = Generator::build(cfg.clone(), 2).unwrap();
        let (_, trace) = g.forward_traced(&uniform(&[2, 4, r, r], 3), Mode::Eval).unwrap();
        assert_eq!(trace.len(), depth - 1);
        for t in &trace {
            assert_eq!(t.concat_channels, t.decoder_channels + t.encoder_channels);
            assert_eq!(t.decoder_spatial, t.encoder_spatial);
            assert_eq!(t.encoder_channels, cfg.encoder_channels(t.stage));
            assert_eq!(t.encoder_spatial, (r >> t.stage, r >> t.stage));
        }
    }
}

#[test]
fn forward_is_pure_and_mode_independent() {
    let cfg = GeneratorConfig { base_filters: 8, ..GeneratorConfig::for_resolution(64) };
    let g = Generator::build(cfg, 4).unwrap();
    let x = uniform(&[1, 4, 64, 64], 9);
    let a: Vec<f32> = g.forward(&x, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = g.forward(&x, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let c: Vec<f32> = g.forward(&x, Mode::Train).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn discriminator_grid_sizes_and_range() {
    for (r, side) in [(512, 30), (128, 6), (64, 2)] {
        let cfg = DiscriminatorConfig { base_filters: 4, ..DiscriminatorConfig::for_resolution(r) };
        let d = Discriminator::build(cfg, 5).unwrap();
        let p = d.forward(&uniform(&[1, 3, r, r], 1), &uniform(&[1, 3, r, r], 2), Mode::Eval).unwrap();
        assert_eq!(p.tensor().dims(), &[1, 1, side, side]);
        let v: Vec<f32> = p.tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&q| q > 0.0 && q < 1.0));
    }
}

#[test]
fn discriminator_seeded_and_deterministic() {
    let cfg = DiscriminatorConfig { base_filters: 4, ..DiscriminatorConfig::for_resolution(64) };
    let a = Discriminator::build(cfg.clone(), 3).unwrap();
    let b = Discriminator::build(cfg, 3).unwrap();
    assert_eq!(a.params().to_host().unwrap(), b.params().to_host().unwrap());
    let (x, y) = (uniform(&[2, 3, 64, 64], 7), uniform(&[2, 3, 64, 64], 8));
    let pa: Vec<f32> = a.forward(&x, &y, Mode::Eval).unwrap().tensor().flatten_all().unwrap().to_vec1().unwrap();
    let pb: Vec<f32> = b.forward(&x, &y, Mode::Eval).unwrap().tensor().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn mismatched_discriminator_inputs_rejected() {
    let d = Discriminator::build(DiscriminatorConfig { base_filters: 4, ..DiscriminatorConfig::for_resolution(64) }, 0)
        .unwrap();
    assert!(d.forward(&uniform(&[1, 3, 64, 64], 1), &uniform(&[1, 3, 128, 128], 2), Mode::Eval).is_err());
    assert!(d.forward(&uniform(&[1, 1, 64, 64], 1), &uniform(&[1, 3, 64, 64], 2), Mode::Eval).is_err());
}

#[test]
fn every_parameter_gets_a_nonzero_gradient() {
    let r = 64;
    let g = Generator::build(GeneratorConfig { base_filters: 8, ..GeneratorConfig::for_resolution(r) }, 11).unwrap();
    let d = Discriminator::build(DiscriminatorConfig { base_filters: 8, ..DiscriminatorConfig::for_resolution(r) }, 12)
        .unwrap();
    let vgg = Vgg16Features::random(4, 13).unwrap();
    let x = uniform(&[2, 3, r, r], 21);
    let target = uniform(&[2, 3, r, r], 22);
    let noise = (uniform(&[2, 1, r, r], 23) * 0.1).unwrap();
    let fake = g.forward(&Tensor::cat(&[&x, &noise], 1).unwrap(), Mode::Train).unwrap();

    let terms = LossTerms {
        pixel: pixel_loss(&target, &fake).unwrap(),
        feature: feature_loss(&vgg, &target, &fake).unwrap(),
        adversarial: adversarial_generator_loss(&d.forward(&x, &fake, Mode::Eval).unwrap(), GeneratorLossKind::default())
            .unwrap(),
        tv: tv_loss(&fake).unwrap(),
    };
    let grads = terms.weighted(&LossWeights::default()).unwrap().backward().unwrap();
    for (name, var) in g.params().iter() {
        let gr = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for generator {name}"));
        let norm = gr.sqr().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        assert!(norm > 0.0, "zero gradient for generator {name}");
    }
    for (name, _) in d.params().iter() {
        // The generator objective must not reach the discriminator's parameters.
        assert!(grads.get(d.params().get(name).unwrap()).is_none(), "generator loss reached {name}");
    }

    let real = d.forward(&x, &target, Mode::Train).unwrap();
    let fk = d.forward(&x, &fake.detach(), Mode::Train).unwrap();
    let dgrads = discriminator_loss(&real, &fk).unwrap().backward().unwrap();
    for (name, var) in d.params().iter() {
        let gr = dgrads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for discriminator {name}"));
        let norm = gr.sqr().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        assert!(norm > 0.0, "zero gradient for discriminator {name}");
    }
    for (name, var) in g.params().iter() {
        assert!(dgrads.get(var.as_tensor()).is_none(), "discriminator loss reached generator {name}");
    }
}

#[test]
fn zeroed_weight_removes_term_from_gradients() {
    let r = 64;
    let g = Generator::build(GeneratorConfig { base_filters: 4, ..GeneratorConfig::for_resolution(r) }, 1).unwrap();
    let d1 = Discriminator::build(DiscriminatorConfig { base_filters: 4, ..DiscriminatorConfig::for_resolution(r) }, 2)
        .unwrap();
    let d2 = Discriminator::build(DiscriminatorConfig { base_filters: 4, ..DiscriminatorConfig::for_resolution(r) }, 3)
        .unwrap();
    let vgg_a = Vgg16Features::random(2, 1).unwrap();
    let vgg_b = Vgg16Features::random(2, 2).unwrap();
    let x = uniform(&[1, 3, r, r], 5);
    let target = uniform(&[1, 3, r, r], 6);
    let input = Tensor::cat(&[&x, &Tensor::zeros((1, 1, r, r), DType::F32, &Device::Cpu).unwrap()], 1).unwrap();

    let grads_for = |w: LossWeights, d: &Discriminator, vgg: &Vgg16Features| -> Vec<Vec<f32>> {
        let fake = g.forward(&input, Mode::Train).unwrap();
        let terms = LossTerms {
            pixel: pixel_loss(&target, &fake).unwrap(),
            feature: feature_loss(vgg, &target, &fake).unwrap(),
            adversarial: adversarial_generator_loss(&d.forward(&x, &fake, Mode::Eval).unwrap(), GeneratorLossKind::default())
                .unwrap(),
            tv: tv_loss(&fake).unwrap(),
        };
        let grads = terms.weighted(&w).unwrap().backward().unwrap();
        g.params()
            .iter()
            .map(|(_, v)| grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap())
            .collect()
    };
    let max_diff = |a: &[Vec<f32>], b: &[Vec<f32>]| -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64))
            .fold(0.0, f64::max)
    };

    // With w_f = 0 the feature extractor cannot matter; with w_G = 0 the discriminator cannot.
    let no_f = LossWeights::new(100.0, 0.0, 1.0, 1e-4).unwrap();
    assert!(max_diff(&grads_for(no_f, &d1, &vgg_a), &grads_for(no_f, &d1, &vgg_b)) <= 1e-9);
    let no_g = LossWeights::new(100.0, 1.0, 0.0, 1e-4).unwrap();
    assert!(max_diff(&grads_for(no_g, &d1, &vgg_a), &grads_for(no_g, &d2, &vgg_a)) <= 1e-9);
    // Sanity: when the weights are live, swapping the component does change gradients.
    let all = LossWeights::default();
    assert!(max_diff(&grads_for(all, &d1, &vgg_a), &grads_for(all, &d1, &vgg_b)) > 1e-9);
    assert!(max_diff(&grads_for(all, &d1, &vgg_a), &grads_for(all, &d2, &vgg_a)) > 1e-9);
}
