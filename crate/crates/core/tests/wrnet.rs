use fpi_core::nn::{
    check_gradients, decode_checkpoint, encode_checkpoint, forward, gradients, init_model, loss_bce, loss_cce, Head, Mode,
    GradCheckReport, ModelConfig, ModelParams, ParamKind, Tensor,
};
use fpi_core::rng::SeededRng;
use fpi_core::synth::{Label, NUM_CLASSES};

fn tiny(head: Head) -> ModelConfig {
    ModelConfig {
        input_size: 8,
        in_channels: 1,
        head,
        width_factor: 1,
        stage_widths: vec![1, 1],
        blocks_per_stage: vec![1, 1],
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    }
}

fn random_images(rng: &mut SeededRng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::from_vec(n, 1, d, d, (0..n * d * d).map(|_| rng.unit()).collect())
}

fn random_label(rng: &mut SeededRng, head: Head, pixels: usize) -> Label {
    match head {
        Head::Sigmoid => Label::Soft((0..pixels).map(|_| rng.unit() as f32).collect()),
        Head::Softmax => Label::Classes((0..pixels).map(|_| rng.below(NUM_CLASSES) as u8).collect()),
    }
}

fn gradient_check(head: Head, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed);
    let mut params: ModelParams<f64> = init_model(&tiny(head), &mut rng).unwrap();
    // Move normalization parameters off their trivial initial values.
    for t in &mut params.tensors {
        if matches!(t.kind, ParamKind::BnScale | ParamKind::BnOffset | ParamKind::Bias) {
            t.data.iter_mut().for_each(|v| *v += rng.uniform(-0.3, 0.3));
        }
    }
    let images = random_images(&mut rng, 2, 8);
    let label = random_label(&mut rng, head, 2 * 64);
    check_gradients(&params, &images, &label, 1e-3).unwrap()
}

fn assert_gradients_close(report: &GradCheckReport) {
    let worst = report.worst().unwrap();
    assert!(report.max_relative_error() < 1e-4, "{worst:?}");
    for g in &report.groups {
        assert!(g.checked * 2 >= g.checked + g.kink_crossings, "{g:?}");
    }
}

#[test]
fn gradients_match_central_differences_sigmoid() {
    assert_gradients_close(&gradient_check(Head::Sigmoid, 5));
}

#[test]
fn gradients_match_central_differences_softmax() {
    assert_gradients_close(&gradient_check(Head::Softmax, 6));
}

#[test]
fn same_seed_same_parameters() {
    let cfg = ModelConfig::desk(64, Head::Sigmoid);
    let a: ModelParams<f32> = init_model(&cfg, &mut SeededRng::new(9)).unwrap();
    let b: ModelParams<f32> = init_model(&cfg, &mut SeededRng::new(9)).unwrap();
    assert_eq!(a, b);
    let c: ModelParams<f32> = init_model(&cfg, &mut SeededRng::new(10)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn kernel_std_tracks_fan_in() {
    let cfg = ModelConfig::full(256, Head::Sigmoid);
    let p: ModelParams<f64> = init_model(&cfg, &mut SeededRng::new(1)).unwrap();
    let mut pooled = (0.0, 0usize);
    for t in p.tensors.iter().filter(|t| t.kind == ParamKind::Weight) {
        let fan_in = (t.shape[1] * t.shape[2] * t.shape[3]) as f64;
        let gain = if t.name.starts_with("head") { 1.0 } else { 2.0 };
        let target = (gain / fan_in).sqrt();
        let n = t.data.len() as f64;
        let mean = t.data.iter().sum::<f64>() / n;
        let std = (t.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if t.data.len() >= 200 {
            assert!((std / target - 1.0).abs() < 0.2, "{}: {std} vs {target}", t.name);
        }
        pooled.0 += t.data.iter().map(|v| (v / target).powi(2)).sum::<f64>();
        pooled.1 += t.data.len();
    }
    let pooled_std = (pooled.0 / pooled.1 as f64).sqrt();
    assert!((pooled_std - 1.0).abs() < 0.2);
}

/// Independent count: 3x3 kernels on the main path, 1x1 shortcuts where the
/// width changes, four normalization scalars per channel (two trainable).
fn expected_parameter_count(cfg: &ModelConfig) -> (usize, usize) {
    let w = cfg.widths();
    let conv = |i: usize, o: usize, k: usize| i * o * k * k;
    let mut trainable = conv(cfg.in_channels, w[0], 3);
    let mut bn_channels = 0;
    let block = |i: usize, o: usize, strided: bool, tr: &mut usize, bn: &mut usize| {
        *tr += conv(i, o, 3) + conv(o, o, 3) + if i != o || strided { conv(i, o, 1) } else { 0 };
        *bn += i + o;
    };
    let mut c = w[0];
    for s in 0..w.len() {
        for k in 0..cfg.blocks_per_stage[s] {
            block(c, w[s], s > 0 && k == 0, &mut trainable, &mut bn_channels);
            c = w[s];
        }
    }
    for s in (0..w.len() - 1).rev() {
        trainable += conv(c, w[s], 3);
        bn_channels += c;
        c = w[s];
        for _ in 0..cfg.blocks_per_stage[s] {
            block(c, c, false, &mut trainable, &mut bn_channels);
        }
    }
    bn_channels += c;
    trainable += conv(c, cfg.head.channels(), 1) + cfg.head.channels();
    (trainable + 2 * bn_channels, 2 * bn_channels)
}

#[test]
fn parameter_count_matches_independent_count() {
    for cfg in [
        ModelConfig::full(256, Head::Sigmoid),
        ModelConfig::full(256, Head::Softmax),
        ModelConfig::full(512, Head::Sigmoid),
        ModelConfig::desk(64, Head::Sigmoid),
    ] {
        let p: ModelParams<f32> = init_model(&cfg, &mut SeededRng::new(0)).unwrap();
        let q: ModelParams<f32> = init_model(&cfg, &mut SeededRng::new(1)).unwrap();
        let (trainable, buffers) = expected_parameter_count(&cfg);
        assert_eq!(p.parameter_count(), trainable);
        assert_eq!(p.parameter_count(), q.parameter_count());
        let all: usize = p.tensors.iter().map(|t| t.data.len()).sum();
        assert_eq!(all - trainable, buffers);
    }
    let full = ModelConfig::full(256, Head::Sigmoid);
    assert_eq!(full.depth(), 14);
    assert_eq!(ModelConfig::full(512, Head::Sigmoid).depth(), 16);
}

#[test]
fn forward_shapes_and_ranges() {
    let mut rng = SeededRng::new(2);
    let sig: ModelParams<f32> = init_model(&ModelConfig::desk(64, Head::Sigmoid), &mut rng).unwrap();
    let soft: ModelParams<f32> = init_model(&ModelConfig::desk(64, Head::Softmax), &mut rng).unwrap();
    let images = Tensor::from_vec(2, 1, 64, 64, (0..2 * 64 * 64).map(|_| rng.unit() as f32).collect());
    for mode in [Mode::Train, Mode::Eval] {
        let p = forward(&sig, &images, mode).unwrap();
        assert_eq!((p.n, p.h, p.w, p.values.len()), (2, 64, 64, 2 * 64 * 64));
        assert!(p.values.iter().all(|&v| v > 0.0 && v < 1.0));
        let q = forward(&soft, &images, mode).unwrap();
        assert_eq!(q.values.len(), 2 * 5 * 64 * 64);
        for s in 0..2 {
            for px in 0..64 * 64 {
                let sum: f32 = (0..5).map(|c| q.values[(s * 5 + c) * 4096 + px]).sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
    }
    let again = forward(&sig, &images, Mode::Eval).unwrap();
    assert_eq!(again, forward(&sig, &images, Mode::Eval).unwrap());
    let wrong = Tensor::from_vec(1, 1, 32, 32, vec![0.0f32; 1024]);
    assert!(forward(&sig, &wrong, Mode::Eval).is_err());
}

fn zero_head(p: &mut ModelParams<f64>) {
    for t in &mut p.tensors {
        if t.name.starts_with("head.conv") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn zero_head_on_zero_input_gives_half() {
    let mut p: ModelParams<f64> = init_model(&ModelConfig::desk(64, Head::Sigmoid), &mut SeededRng::new(4)).unwrap();
    zero_head(&mut p);
    let out = forward(&p, &Tensor::zeros(1, 1, 64, 64), Mode::Eval).unwrap();
    assert!(out.values.iter().all(|&v| v == 0.5));
}

#[test]
fn gradient_vanishes_at_probe_optimum() {
    // With a zero head kernel the output is sigmoid(bias) everywhere; a bias
    // of logit(alpha) is the exact optimum for a constant soft label alpha.
    let alpha = 0.25f64;
    let mut p: ModelParams<f64> = init_model(&tiny(Head::Sigmoid), &mut SeededRng::new(3)).unwrap();
    zero_head(&mut p);
    p.get_mut("head.conv.bias").unwrap().data[0] = (alpha / (1.0 - alpha)).ln();
    let mut rng = SeededRng::new(8);
    let images = random_images(&mut rng, 2, 8);
    let g = gradients(&p, &images, &Label::Soft(vec![alpha as f32; 128]), 1.0).unwrap();
    for grad in &g.grads {
        assert!(grad.iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn loss_scale_is_linear() {
    let mut rng = SeededRng::new(12);
    let p: ModelParams<f64> = init_model(&tiny(Head::Softmax), &mut rng).unwrap();
    let images = random_images(&mut rng, 2, 8);
    let label = random_label(&mut rng, Head::Softmax, 128);
    let one = gradients(&p, &images, &label, 1.0).unwrap();
    let two = gradients(&p, &images, &label, 2.0).unwrap();
    assert_eq!(two.loss, 2.0 * one.loss);
    for (a, b) in one.grads.iter().flatten().zip(two.grads.iter().flatten()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn gradient_loss_matches_forward_loss() {
    let mut rng = SeededRng::new(13);
    for head in [Head::Sigmoid, Head::Softmax] {
        let p: ModelParams<f64> = init_model(&tiny(head), &mut rng).unwrap();
        let images = random_images(&mut rng, 2, 8);
        let label = random_label(&mut rng, head, 128);
        let pred = forward(&p, &images, Mode::Train).unwrap();
        let direct = match &label {
            Label::Soft(a) => loss_bce(&pred, a).unwrap(),
            Label::Classes(c) => loss_cce(&pred, c).unwrap(),
        };
        let g = gradients(&p, &images, &label, 1.0).unwrap();
        assert!((direct - g.loss).abs() < 1e-10);
    }
}

#[test]
fn mismatched_labels_are_rejected() {
    let mut rng = SeededRng::new(14);
    let p: ModelParams<f64> = init_model(&tiny(Head::Sigmoid), &mut rng).unwrap();
    let images = random_images(&mut rng, 1, 8);
    assert!(gradients(&p, &images, &Label::Classes(vec![0; 64]), 1.0).is_err());
    assert!(gradients(&p, &images, &Label::Soft(vec![0.5; 63]), 1.0).is_err());
    assert!(gradients(&p, &images, &Label::Soft(vec![1.5; 64]), 1.0).is_err());
}

#[test]
fn checkpoint_round_trips_bit_exact() {
    let p: ModelParams<f32> = init_model(&ModelConfig::desk(64, Head::Softmax), &mut SeededRng::new(21)).unwrap();
    let bytes = encode_checkpoint(&p);
    let q = decode_checkpoint(&bytes).unwrap();
    assert_eq!(p, q);
    assert_eq!(bytes, encode_checkpoint(&q));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
    assert!(decode_checkpoint(b"not a checkpoint at all").is_err());
}

#[test]
fn inconsistent_config_is_rejected() {
    let mut cfg = ModelConfig::desk(64, Head::Sigmoid);
    cfg.blocks_per_stage.pop();
    assert!(init_model::<f32>(&cfg, &mut SeededRng::new(0)).is_err());
    let odd = ModelConfig::desk(62, Head::Sigmoid);
    assert!(init_model::<f32>(&odd, &mut SeededRng::new(0)).is_err());
}
