//! Schedule, optimizer, losses, metrics, synthetic data, and training-loop examples.

use paka::gradcheck::{grad_check, CheckOptions, Stateless, PRIMITIVE_TOLERANCE};
use paka::train::data::{
    constant_predictor_mse, edge_alignment, flat_scene, gen_depth_scenes, gen_direction_copy, gen_direction_copy_with,
    gen_shapes_seg, DirectionCopyConfig, ShapesConfig, DIRECTIONS, EAST,
};
use paka::train::metrics::{metrics_seg, metrics_sr, psnr_from_rmse};
use paka::train::{self, poly_lr, sgd_step, Dataset, ModelId, RunConfig};
use paka::{ops, ConvSpec, Graph, Mode, Module, Rng, Tensor, UpsampleKind};

#[test]
fn poly_schedule_examples() {
    assert_eq!(poly_lr(0.01, 0.9, 0, 1000), 0.01);
    assert_eq!(poly_lr(0.01, 0.9, 1000, 1000), 0.0);
    assert!((poly_lr(0.01, 0.9, 75_000, 150_000) - 0.005_358_867_312_681_466).abs() < 1e-9);
}

#[test]
fn plain_sgd_step() {
    let mut p = vec![1.0, -2.0];
    let mut v = vec![0.0; 2];
    sgd_step(&mut p, &[0.5, 0.25], &mut v, 0.1, 0.0, 0.0);
    assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.025]);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut p = vec![0.3, 0.7];
    let mut v = vec![0.0; 2];
    for _ in 0..5 {
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
    }
    assert_eq!(p, vec![0.3, 0.7]);
}

#[test]
fn momentum_displacement_after_two_steps() {
    let (lr, g) = (0.1, 0.5);
    let mut p = vec![0.0];
    let mut v = vec![0.0];
    sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
    sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
    assert!((p[0] + lr * (g + 1.9 * g)).abs() < 1e-15);
}

fn cross_entropy(logits: Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::new(Mode::Eval);
    let l = g.constant(logits);
    let loss = g.cross_entropy(l, labels).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn cross_entropy_examples() {
    let uniform = cross_entropy(Tensor::full([2, 4, 3, 3], 0.4), &[1; 18]);
    assert!((uniform - 4f64.ln()).abs() < 1e-12);
    let mut last = f64::INFINITY;
    for scale in [1.0, 10.0, 100.0, 1000.0] {
        let logits = Tensor::from_fn([1, 3, 2, 2], |[_, c, _, _]| if c == 2 { scale } else { 0.0 });
        let loss = cross_entropy(logits, &[2; 4]);
        assert!(loss <= last);
        last = loss;
    }
    assert!(last < 1e-12);
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = Rng::new(3);
    let logits = Tensor::randn([2, 4, 3, 3], 1.5, &mut rng);
    let labels: Vec<usize> = (0..18).map(|_| rng.below(4)).collect();
    let errs = grad_check(
        &mut Stateless,
        &[logits],
        Mode::Train,
        &CheckOptions::new(),
        3,
        |_, g, v| g.cross_entropy(v[0], &labels),
    )
    .unwrap();
    assert!(errs[0].max_rel_err < PRIMITIVE_TOLERANCE, "{errs:?}");
}

#[test]
fn segmentation_metric_examples() {
    let perfect = metrics_seg(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
    assert_eq!((perfect.miou, perfect.pix_acc), (1.0, 1.0));
    let disjoint = metrics_seg(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(disjoint.miou, 0.0);
    let hand = metrics_seg(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(hand.pix_acc, 0.75);
    assert!((hand.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn psnr_reproduces_reported_pairs() {
    for (rmse, psnr) in [(5.47, 33.37), (2.26, 41.04)] {
        assert!((psnr_from_rmse(rmse, 255.0) - psnr).abs() < 0.01);
    }
    let exact = metrics_sr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 255.0).unwrap();
    assert_eq!(exact.rmse, 0.0);
}

#[test]
fn fixed_east_beacon_is_a_one_pixel_shift() {
    let cfg = DirectionCopyConfig {
        fixed: Some(EAST),
        ..DirectionCopyConfig::new(16)
    };
    let set = gen_direction_copy_with(&cfg, 0, 4).unwrap();
    let (dy, dx) = DIRECTIONS[EAST];
    let spec = ConvSpec::same(3, 1);
    let tap = ((dy + 1) * 3 + dx + 1) as usize;
    let channels = set[0].input.channels();
    let w = Tensor::from_fn(
        [1, 9, channels, 1],
        |[_, k, c, _]| if k == tap && c == 0 { 1.0 } else { 0.0 },
    );
    for s in &set {
        let y = ops::conv2d(&s.input, &w, None, spec).unwrap();
        let mse = y.sub(&s.target).unwrap().data().iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        assert!(mse < 1e-6);
    }
}

#[test]
fn generators_are_deterministic() {
    let a = gen_direction_copy(5, 3, 16).unwrap();
    let b = gen_direction_copy(5, 3, 16).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            (&x.input, &x.target, &x.directions),
            (&y.input, &y.target, &y.directions)
        );
    }
    assert_eq!(
        gen_shapes_seg(5, 3, 32, 4).unwrap(),
        gen_shapes_seg(5, 3, 32, 4).unwrap()
    );
    let (d1, d2) = (
        gen_depth_scenes(5, 2, 32, 4).unwrap(),
        gen_depth_scenes(5, 2, 32, 4).unwrap(),
    );
    for (x, y) in d1.iter().zip(&d2) {
        assert_eq!(
            (&x.lr_depth, &x.guide, &x.hr_depth),
            (&y.lr_depth, &y.guide, &y.hr_depth)
        );
    }
}

#[test]
fn constant_predictor_matches_target_variance() {
    let size = 64;
    let set = gen_direction_copy(0, 200, size).unwrap();
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
    for s in &set {
        for &v in s.target.data() {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    let mean = sum / n;
    let empirical = sq / n - mean * mean;
    let analytic = constant_predictor_mse(size);
    assert!(
        (empirical - analytic).abs() < 0.02,
        "empirical {empirical} analytic {analytic}"
    );
}

#[test]
fn shape_class_frequencies_follow_the_area_budget() {
    let cfg = ShapesConfig::new(64, 5);
    let set = gen_shapes_seg(0, 1000, 64, 5).unwrap();
    let mut counts = [0usize; 5];
    for s in &set {
        for &l in &s.labels {
            counts[l] += 1;
        }
    }
    let total = (1000 * 64 * 64) as f64;
    for (class, &c) in counts.iter().enumerate().skip(1) {
        let freq = c as f64 / total;
        assert!(
            (freq - cfg.area_budget).abs() <= 0.02 * cfg.area_budget,
            "class {class}: {freq}"
        );
    }
}

#[test]
fn flat_scene_is_recovered_by_bicubic() {
    let scene = flat_scene(32, 4, 0.37).unwrap();
    let up = ops::upsample(&scene.lr_depth, 4, UpsampleKind::Bicubic).unwrap();
    let m = metrics_sr(up.data(), scene.hr_depth.data(), 1.0).unwrap();
    assert!(m.rmse < 1e-3);
}

#[test]
fn depth_edges_align_with_guide_edges() {
    let scenes = gen_depth_scenes(0, 20, 64, 4).unwrap();
    let mut fractions = Vec::new();
    for s in &scenes {
        if let Some(f) = edge_alignment(s, 0.02, 0.05) {
            fractions.push(f);
        }
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!(mean > 0.9, "aligned fraction {mean}");
}

fn params(m: &dyn Module) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, p| out.push((name.to_string(), p.value.data().to_vec())));
    out
}

fn tiny(model: ModelId) -> RunConfig {
    RunConfig {
        size: 16,
        train_samples: 8,
        test_samples: 2,
        batch_size: 2,
        total_iters: 6,
        log_every: 3,
        width: 8,
        ..RunConfig::new(model)
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    for model in [ModelId::PakaSingle, ModelId::HpmSeg] {
        let cfg = RunConfig { lr: 0.0, ..tiny(model) };
        let out = train::train(&cfg).unwrap();
        assert_eq!(params(&out.model), params(&train::init_model(&cfg).unwrap()));
    }
}

#[test]
fn zero_iterations_return_the_initialization() {
    let cfg = RunConfig {
        total_iters: 0,
        ..tiny(ModelId::HpmRegress)
    };
    let out = train::train(&cfg).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(params(&out.model), params(&train::init_model(&cfg).unwrap()));
}

#[test]
fn identical_configs_give_identical_logs() {
    for model in [ModelId::PakaSingle, ModelId::HpmSeg, ModelId::Dsr] {
        let mut cfg = tiny(model);
        if model == ModelId::Dsr {
            cfg.size = 32;
        }
        let a = train::log_csv(&train::train(&cfg).unwrap().log).unwrap();
        let b = train::log_csv(&train::train(&cfg).unwrap().log).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 3);
    }
}

#[test]
fn single_sample_overfit() {
    let cfg = RunConfig {
        size: 16,
        lr: 0.1,
        batch_size: 1,
        total_iters: 500,
        log_every: 500,
        width: 16,
        ..RunConfig::new(ModelId::HpmRegress)
    };
    let sample = gen_direction_copy(0, 1, 16).unwrap();
    let dataset = Dataset::Copy {
        train: sample.clone(),
        test: sample,
    };
    let out = train::train_on(&cfg, &dataset).unwrap();
    let mse = out.metrics["test_mse"];
    assert!(mse < 1e-3, "mse {mse}");
}

#[test]
fn untrained_segmenter_predicts_background() {
    let cfg = RunConfig {
        size: 32,
        test_samples: 20,
        ..RunConfig::new(ModelId::HpmSeg)
    };
    let dataset = Dataset::build(&cfg).unwrap();
    let mut model = train::init_model(&cfg).unwrap();
    let m = train::evaluate(&mut model, &dataset, &cfg).unwrap();
    let Dataset::Seg { test, .. } = &dataset else {
        unreachable!()
    };
    let labels: Vec<usize> = test.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let background = labels.iter().filter(|&&l| l == 0).count() as f64 / labels.len() as f64;
    assert!((m["pix_acc"] - background).abs() < 1e-12);
}
