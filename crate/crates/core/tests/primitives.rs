//! Worked examples for the differentiable primitives and the gradient checker.

mod common;

use paka::gradcheck::{grad_check, CheckOptions, Stateless};
use paka::nn::BatchNorm;
use paka::{ops, Activation, ConvSpec, Graph, Mode, Rng, Tensor, UpsampleKind};

/// tanh(1) to 30 significant digits.
const TANH_ONE: f64 = 0.761_594_155_955_764_888_119_458_282_605;

#[test]
fn conv_counts_unpadded_taps() {
    let x = Tensor::full([1, 1, 3, 3], 1.0);
    let w = Tensor::full([1, 9, 1, 1], 1.0);
    let y = ops::conv2d(&x, &w, Some(&Tensor::zeros([1, 1, 1, 1])), ConvSpec::same(3, 1)).unwrap();
    assert_eq!(y.at(0, 0, 1, 1), 9.0);
    for (cy, cx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(y.at(0, 0, cy, cx), 4.0);
    }
}

#[test]
fn conv_scalar_product() {
    let y = ops::conv2d(
        &Tensor::full([1, 1, 1, 1], 3.0),
        &Tensor::full([1, 1, 1, 1], 2.0),
        None,
        ConvSpec::pointwise(),
    )
    .unwrap();
    assert_eq!(y.data(), &[6.0]);
}

fn bn_train(x: &Tensor, gamma: f64, beta: f64) -> Tensor {
    let mut bn = BatchNorm::new(x.channels());
    bn.gamma.value = Tensor::full([1, x.channels(), 1, 1], gamma);
    bn.beta.value = Tensor::full([1, x.channels(), 1, 1], beta);
    let mut g = Graph::new(Mode::Train);
    let xv = g.constant(x.clone());
    let y = bn.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

fn channel_moments(y: &Tensor, c: usize) -> (f64, f64) {
    let [nb, _, h, w] = y.dims();
    let vals: Vec<f64> = (0..nb).flat_map(|b| y.plane(b, c).to_vec()).collect();
    let n = (nb * h * w) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

#[test]
fn batch_norm_of_constant_input_is_beta() {
    let y = bn_train(&Tensor::full([2, 3, 4, 4], 5.0), 1.7, -0.3);
    assert!(y.data().iter().all(|&v| (v + 0.3).abs() < 1e-12));
}

#[test]
fn batch_norm_leaves_standardized_input_nearly_unchanged() {
    let mut x = Tensor::randn([4, 2, 8, 8], 1.0, &mut Rng::new(3));
    for c in 0..2 {
        let (mean, var) = channel_moments(&x, c);
        for b in 0..4 {
            for v in x.plane_mut(b, c) {
                *v = (*v - mean) / var.sqrt();
            }
        }
    }
    let y = bn_train(&x, 1.0, 0.0);
    assert!(common::max_diff(&x, &y) < 1e-4);
}

#[test]
fn batch_norm_output_statistics() {
    // Output variance is σ²/(σ² + ε); σ = 5 keeps the ε deficit below 1e-6.
    let x = Tensor::randn([4, 3, 5, 5], 5.0, &mut Rng::new(0));
    let x = x.map(|v| v + 3.0);
    let y = bn_train(&x, 1.0, 0.0);
    for c in 0..3 {
        let (mean, var) = channel_moments(&y, c);
        assert!(mean.abs() < 1e-12, "channel {c} mean {mean}");
        assert!((1.0 - 1e-6..=1.0).contains(&var), "channel {c} var {var}");
    }
}

#[test]
fn activations() {
    let x = Tensor::new([1, 1, 1, 3], vec![-2.0, 3.0, 0.0]).unwrap();
    assert_eq!(ops::activation(&x, Activation::Relu).data(), &[0.0, 3.0, 0.0]);
    assert_eq!(ops::activation(&x, Activation::Tanh).data()[2], 0.0);
    let one = ops::activation(&Tensor::scalar(1.0), Activation::Tanh);
    assert!((one.data()[0] - TANH_ONE).abs() < 1e-12);
}

#[test]
fn global_average_pool() {
    let c = ops::global_avg_pool(&Tensor::full([1, 2, 3, 3], 1.5), false);
    assert!(c.data().iter().all(|&v| v == 1.5));
    let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(ops::global_avg_pool(&x, false).data(), &[2.5]);
    let r = Tensor::randn([2, 3, 5, 7], 1.0, &mut Rng::new(9));
    let pooled = ops::global_avg_pool(&r, false);
    for b in 0..2 {
        for c in 0..3 {
            let direct = r.plane(b, c).iter().sum::<f64>() / 35.0;
            assert!((pooled.at(b, c, 0, 0) - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn upsampling_examples() {
    let c = Tensor::full([1, 2, 3, 4], 0.7);
    for kind in [UpsampleKind::Nearest, UpsampleKind::Bilinear, UpsampleKind::Bicubic] {
        for factor in [2, 4] {
            let y = ops::upsample(&c, factor, kind).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12), "{kind:?} x{factor}");
        }
    }
    let pair = Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
    assert_eq!(
        ops::upsample(&pair, 2, UpsampleKind::Nearest).unwrap().data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
    );
}

#[test]
fn bilinear_preserves_a_linear_ramp_at_sample_points() {
    let (h, w, f) = (6, 6, 2);
    let ramp = Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| 0.3 * y as f64 - 0.7 * x as f64 + 1.0);
    let up = ops::upsample(&ramp, f, UpsampleKind::Bilinear).unwrap();
    // Half-pixel centers: output (Y, X) samples input (Y + 0.5) / f − 0.5; the
    // border rows clamp, so compare the interior.
    for yy in f..f * (h - 1) {
        for xx in f..f * (w - 1) {
            let sy = (yy as f64 + 0.5) / f as f64 - 0.5;
            let sx = (xx as f64 + 0.5) / f as f64 - 0.5;
            let expect = 0.3 * sy - 0.7 * sx + 1.0;
            assert!((up.at(0, 0, yy, xx) - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn concat_identity_and_slicing() {
    let mut rng = Rng::new(2);
    let a = Tensor::randn([2, 3, 4, 4], 1.0, &mut rng);
    let b = Tensor::randn([2, 5, 4, 4], 1.0, &mut rng);
    assert_eq!(ops::concat_channels(std::slice::from_ref(&a)).unwrap(), a);
    let ab = ops::concat_channels(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(ab.channels(), 8);
    assert_eq!(ab.slice_channels(0, 3).unwrap(), a);
    assert_eq!(ab.slice_channels(3, 8).unwrap(), b);
}

#[test]
fn concat_backward_routes_ones() {
    let mut rng = Rng::new(4);
    let mut g = Graph::new(Mode::Train);
    let a = g.input(Tensor::randn([1, 2, 3, 3], 1.0, &mut rng));
    let b = g.input(Tensor::randn([1, 4, 3, 3], 1.0, &mut rng));
    let ab = g.concat_channels(&[a, b]).unwrap();
    let loss = g.sum(ab);
    let grads = g.backward(loss).unwrap();
    for v in [a, b] {
        assert!(grads.get(v).unwrap().data().iter().all(|&d| d == 1.0));
    }
}

#[test]
fn gradcheck_square_sum() {
    let x = Tensor::randn([1, 1, 2, 4], 1.0, &mut Rng::new(1));
    let errs = grad_check(&mut Stateless, &[x], Mode::Train, &CheckOptions::new(), 1, |_, g, v| {
        let n = g.value(v[0]).len() as f64;
        let zero = Tensor::zeros(g.value(v[0]).dims());
        let mean_sq = g.mse(v[0], &zero)?;
        Ok(g.scale(mean_sq, n))
    })
    .unwrap();
    for e in errs {
        assert!(e.max_rel_err < 1e-9, "{e:?}");
    }
}

#[test]
fn gradcheck_conv_tanh_sum_seed_42() {
    let mut rng = Rng::new(42);
    let x = Tensor::randn([1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn([3, 9, 2, 1], 0.3, &mut rng);
    let errs = grad_check(
        &mut Stateless,
        &[x, w],
        Mode::Train,
        &CheckOptions::new(),
        42,
        |_, g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvSpec::same(3, 1))?;
            let t = g.tanh(y);
            Ok(g.sum(t))
        },
    )
    .unwrap();
    for e in errs {
        assert!(e.max_rel_err < 1e-6, "{e:?}");
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let mut rng = Rng::new(42);
    let x = Tensor::randn([1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn([3, 9, 2, 1], 0.3, &mut rng);
    let opts = CheckOptions {
        fault: Some("conv2d".into()),
        ..CheckOptions::new()
    };
    let errs = grad_check(&mut Stateless, &[x, w], Mode::Train, &opts, 42, |_, g, v| {
        g.conv2d(v[0], v[1], None, ConvSpec::same(3, 1))
    })
    .unwrap();
    assert!(errs.iter().any(|e| e.max_rel_err > 1e-3));
}
