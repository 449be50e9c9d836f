//! Agreement of the optimized kernels and modules with direct-loop oracles.

mod common;

use paka::gradcheck::randomize;
use paka::hpm::{CascadeLayer, HpmConfig, HpmState};
use paka::joint::JointUpLayer;
use paka::paka::{paka_conv2d_fused, paka_conv2d_materialized, PakaConfig, PakaLayer};
use paka::{kernel_attention, ops, ConvSpec, Graph, Mode, Rng, Tensor};

const TOL: f64 = 1e-10;
const INSTANCES: u64 = 100;

fn pick<T: Copy>(rng: &mut Rng, xs: &[T]) -> T {
    xs[rng.below(xs.len())]
}

fn dim(rng: &mut Rng, lo: usize) -> usize {
    lo + rng.below(9 - lo)
}

fn random_spec(rng: &mut Rng) -> ConvSpec {
    let kernel_size = pick(rng, &[1, 3, 5]);
    let dilation = [1, 2, 4][rng.below(3)];
    let stride = 1 + rng.below(2);
    let same = dilation * (kernel_size - 1) / 2;
    let mut padding = rng.below(same + 1);
    if dilation * (kernel_size - 1) + 1 > 8 + 2 * padding {
        padding = same;
    }
    ConvSpec {
        kernel_size,
        dilation,
        stride,
        padding,
    }
}

/// Input size large enough for `spec` to produce at least one output.
fn min_size(spec: &ConvSpec) -> usize {
    (spec.dilation * (spec.kernel_size - 1) + 1)
        .saturating_sub(2 * spec.padding)
        .max(1)
}

fn eval_forward(f: impl FnOnce(&mut Graph) -> paka::Result<paka::Var>) -> Tensor {
    let mut g = Graph::new(Mode::Eval);
    let y = f(&mut g).unwrap();
    g.value(y).clone()
}

#[test]
fn conv2d_matches_oracle_on_random_instances() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::derived(seed, 1);
        let spec = random_spec(&mut rng);
        let lo = min_size(&spec);
        let (nb, c, o) = (1 + rng.below(2), dim(&mut rng, 1), dim(&mut rng, 1));
        let (h, w) = (dim(&mut rng, lo), dim(&mut rng, lo));
        let x = Tensor::randn([nb, c, h, w], 1.0, &mut rng);
        let wt = Tensor::randn([o, spec.taps(), c, 1], 1.0, &mut rng);
        let b = Tensor::randn([1, o, 1, 1], 1.0, &mut rng);
        let y = ops::conv2d(&x, &wt, Some(&b), spec).unwrap();
        let d = common::max_diff(&y, &common::conv(&x, &wt, Some(&b), &spec));
        assert!(d <= TOL, "seed {seed} {spec:?}: {d:e}");
    }
}

#[test]
fn conv2d_seed_42_dilation_2() {
    let mut rng = Rng::new(42);
    let spec = ConvSpec::same(3, 2);
    let x = Tensor::randn([2, 4, 8, 8], 1.0, &mut rng);
    let w = Tensor::randn([6, 9, 4, 1], 1.0, &mut rng);
    let y = ops::conv2d(&x, &w, None, spec).unwrap();
    assert_eq!(y.dims(), [2, 6, 8, 8]);
    assert!(common::max_diff(&y, &common::conv(&x, &w, None, &spec)) <= TOL);
}

#[test]
fn paka_conv2d_matches_oracle_on_random_instances() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::derived(seed, 2);
        let spec = random_spec(&mut rng);
        let lo = min_size(&spec);
        let (nb, c, o) = (1 + rng.below(2), dim(&mut rng, 1), dim(&mut rng, 1));
        let (h, w) = (dim(&mut rng, lo), dim(&mut rng, lo));
        let (ho, wo) = (common::out_size(h, &spec), common::out_size(w, &spec));
        let x = Tensor::randn([nb, c, h, w], 1.0, &mut rng);
        let wt = Tensor::randn([o, spec.taps(), c, 1], 1.0, &mut rng);
        let b = Tensor::randn([1, o, 1, 1], 1.0, &mut rng);
        let m = Tensor::randn([nb, spec.taps(), ho, wo], 1.5, &mut rng);
        let n = Tensor::randn([nb, c, ho, wo], 1.5, &mut rng);
        let oracle = common::paka_conv(&x, &wt, Some(&b), &m, &n, &spec);
        let fused = paka_conv2d_fused(&x, &wt, Some(&b), &m, &n, spec).unwrap();
        let a = kernel_attention(&m, &n).unwrap();
        let materialized = paka_conv2d_materialized(&x, &wt, Some(&b), &a, spec).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let vars = [&x, &wt, &b, &m, &n].map(|t| g.constant(t.clone()));
        let taped = g
            .paka_conv2d(vars[0], vars[1], Some(vars[2]), vars[3], vars[4], spec)
            .unwrap();
        for (name, y) in [
            ("fused", &fused),
            ("materialized", &materialized),
            ("taped", g.value(taped)),
        ] {
            let d = common::max_diff(y, &oracle);
            assert!(d <= TOL, "seed {seed} {name} {spec:?}: {d:e}");
        }
    }
}

#[test]
fn paka_conv2d_seed_7() {
    let mut rng = Rng::new(7);
    let spec = ConvSpec::same(3, 1);
    let x = Tensor::randn([2, 4, 6, 6], 1.0, &mut rng);
    let w = Tensor::randn([4, 9, 4, 1], 1.0, &mut rng);
    let b = Tensor::randn([1, 4, 1, 1], 1.0, &mut rng);
    let m = Tensor::randn([2, 9, 6, 6], 1.0, &mut rng);
    let n = Tensor::randn([2, 4, 6, 6], 1.0, &mut rng);
    let y = paka_conv2d_fused(&x, &w, Some(&b), &m, &n, spec).unwrap();
    assert!(common::max_diff(&y, &common::paka_conv(&x, &w, Some(&b), &m, &n, &spec)) <= TOL);
}

#[test]
fn paka_layer_matches_oracle_on_random_instances() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::derived(seed, 3);
        let mut spec = random_spec(&mut rng);
        spec.padding = spec.dilation * (spec.kernel_size - 1) / 2;
        let (c, o, h, w) = (dim(&mut rng, 1), dim(&mut rng, 1), dim(&mut rng, 1), dim(&mut rng, 1));
        let mut layer = PakaLayer::new(&PakaConfig::new(c, o, spec), &mut rng).unwrap();
        randomize(&mut layer, &mut rng);
        let x = Tensor::randn([1 + rng.below(2), c, h, w], 1.0, &mut rng);
        let y = eval_forward(|g| {
            let xv = g.constant(x.clone());
            layer.forward(g, xv)
        });
        let d = common::max_diff(&y, &common::paka_layer(&x, &layer));
        assert!(d <= TOL, "seed {seed} {spec:?}: {d:e}");
    }
}

fn random_hpm_config(rng: &mut Rng) -> HpmConfig {
    let layers = 1 + rng.below(3);
    let mut dilation = 0;
    let cascade = (0..layers)
        .map(|_| {
            dilation += 1 + rng.below(2);
            CascadeLayer {
                channels: dim(rng, 1),
                dilation,
            }
        })
        .collect();
    HpmConfig {
        in_channels: dim(rng, 1),
        bottleneck_channels: dim(rng, 1),
        cascade,
        include_global_pool: rng.below(2) == 0,
        fusion_channels: (rng.below(2) == 0).then(|| dim(rng, 1)),
        dense: rng.below(2) == 0,
        attention: rng.below(4) != 0,
    }
}

#[test]
fn hpm_forward_matches_oracle_on_random_instances() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::derived(seed, 4);
        let cfg = random_hpm_config(&mut rng);
        let mut state = HpmState::new(&cfg, &mut rng).unwrap();
        randomize(&mut state, &mut rng);
        let x = Tensor::randn(
            [1 + rng.below(2), cfg.in_channels, dim(&mut rng, 1), dim(&mut rng, 1)],
            1.0,
            &mut rng,
        );
        let y = eval_forward(|g| {
            let xv = g.constant(x.clone());
            state.forward(g, xv)
        });
        let d = common::max_diff(&y, &common::hpm(&x, &state));
        assert!(d <= TOL, "seed {seed} {cfg:?}: {d:e}");
    }
}

#[test]
fn joint_upsample_matches_oracle_on_random_instances() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::derived(seed, 5);
        let (c, gc, o) = (dim(&mut rng, 1), dim(&mut rng, 1), dim(&mut rng, 1));
        let (h, w) = (1 + rng.below(4), 1 + rng.below(4));
        let nb = 1 + rng.below(2);
        let mut layer = JointUpLayer::new(c, gc, o, &mut rng);
        randomize(&mut layer, &mut rng);
        let t = Tensor::randn([nb, c, h, w], 1.0, &mut rng);
        let guide = Tensor::randn([nb, gc, 2 * h, 2 * w], 1.0, &mut rng);
        let y = eval_forward(|g| {
            let (tv, gv) = (g.constant(t.clone()), g.constant(guide.clone()));
            layer.forward(g, tv, gv)
        });
        let d = common::max_diff(&y, &common::joint_up(&t, &guide, &layer));
        assert!(d <= TOL, "seed {seed}: {d:e}");
    }
}

#[test]
fn joint_upsample_seed_11() {
    let mut rng = Rng::new(11);
    let mut layer = JointUpLayer::new(3, 4, 2, &mut rng);
    randomize(&mut layer, &mut rng);
    let t = Tensor::randn([1, 3, 4, 4], 1.0, &mut rng);
    let guide = Tensor::randn([1, 4, 8, 8], 1.0, &mut rng);
    let y = eval_forward(|g| {
        let (tv, gv) = (g.constant(t.clone()), g.constant(guide.clone()));
        layer.forward(g, tv, gv)
    });
    assert_eq!(y.dims(), [1, 2, 8, 8]);
    assert!(common::max_diff(&y, &common::joint_up(&t, &guide, &layer)) <= TOL);
}

#[test]
fn parallel_path_matches_sequential() {
    let mut rng = Rng::new(5);
    let cfg = HpmConfig::toy(6);
    let mut state = HpmState::new(&cfg, &mut rng).unwrap();
    randomize(&mut state, &mut rng);
    let x = Tensor::randn([3, 6, 8, 8], 1.0, &mut rng);
    let mut run = |threads| {
        paka::parallel::set_threads(threads);
        eval_forward(|g| {
            let xv = g.constant(x.clone());
            state.forward(g, xv)
        })
    };
    let one = run(1);
    let four = run(4);
    paka::parallel::set_threads(1);
    assert_eq!(one.data(), four.data());
}
