//! Propagational field examples: vectors, footprints, rendering.

use std::collections::BTreeMap;

use paka::field::{
    propagational_field, render_field_image, trace_attention, FieldQuery, FieldResult, LayerField, RenderOptions,
    ARROW_COLORS, MARKER,
};
use paka::graph::AttentionTrace;
use paka::{ConvSpec, PakaConfig, PakaLayer, Rng, Tensor};

fn trace(m: Tensor, dilation: usize) -> AttentionTrace {
    AttentionTrace {
        name: format!("d{dilation}"),
        spec: ConvSpec::same(3, dilation),
        directional: m,
    }
}

fn east_tap(spec: &ConvSpec) -> usize {
    spec.unit_offsets().iter().position(|&o| o == (0, 1)).unwrap()
}

#[test]
fn east_modulation_gives_an_east_vector_of_known_length() {
    for (d, c) in [(1, 0.3), (2, 1.1), (4, -0.5)] {
        let spec = ConvSpec::same(3, d);
        let east = east_tap(&spec);
        let m = Tensor::from_fn([1, 9, 6, 6], |[_, k, _, _]| if k == east { c } else { 0.0 });
        let fr = propagational_field(&[trace(m, d)], &FieldQuery::new(3, 3)).unwrap();
        let (dy, dx) = fr.layers[0].vector;
        assert!(dy.abs() < 1e-15);
        assert!((dx - d as f64 * c.tanh()).abs() < 1e-14, "d {d} c {c}: {dx}");
    }
}

#[test]
fn zero_modulation_gives_zero_vectors_everywhere() {
    let layers = [
        trace(Tensor::zeros([1, 9, 5, 5]), 1),
        trace(Tensor::zeros([1, 9, 5, 5]), 2),
    ];
    for y in 0..5 {
        for x in 0..5 {
            let fr = propagational_field(&layers, &FieldQuery::new(y, x)).unwrap();
            assert_eq!(fr.shared_vector(), (0.0, 0.0));
        }
    }
}

#[test]
fn two_layer_footprint_stays_in_the_combined_window() {
    let mut rng = Rng::new(1);
    let layers = [
        trace(Tensor::randn([1, 9, 15, 15], 1.0, &mut rng), 1),
        trace(Tensor::randn([1, 9, 15, 15], 1.0, &mut rng), 2),
    ];
    let fr = propagational_field(&layers, &FieldQuery::new(7, 7)).unwrap();
    assert!(fr.footprint.keys().all(|&(dy, dx)| dy.abs() <= 3 && dx.abs() <= 3));
    assert!(fr.footprint.contains_key(&(3, 3)) && fr.footprint.contains_key(&(-3, -3)));
    assert_eq!(fr.moving_path.len(), 3);
}

#[test]
fn field_is_translation_equivariant() {
    let mut rng = Rng::new(2);
    let (h, w, sy, sx) = (12, 12, 1, 2);
    let base: Vec<Tensor> = (0..2).map(|_| Tensor::randn([1, 9, h, w], 1.0, &mut rng)).collect();
    let shifted: Vec<Tensor> = base
        .iter()
        .map(|m| {
            Tensor::from_fn([1, 9, h + sy, w + sx], |[_, k, y, x]| {
                if y >= sy && x >= sx {
                    m.at(0, k, y - sy, x - sx)
                } else {
                    0.0
                }
            })
        })
        .collect();
    let make = |ms: &[Tensor]| vec![trace(ms[0].clone(), 1), trace(ms[1].clone(), 2)];
    let a = propagational_field(&make(&base), &FieldQuery::new(5, 6)).unwrap();
    let b = propagational_field(&make(&shifted), &FieldQuery::new(5 + sy, 6 + sx)).unwrap();
    assert_eq!(a.layers, b.layers);
    assert_eq!(a.footprint, b.footprint);
}

fn bare_result(vector: (f64, f64)) -> FieldResult {
    FieldResult {
        query: (2, 3),
        dims: (6, 6),
        layers: vec![LayerField {
            name: "layer".into(),
            dilation: 1,
            vector,
        }],
        footprint: BTreeMap::new(),
        moving_path: vec![(2.0, 3.0)],
    }
}

#[test]
fn zero_field_renders_only_the_marker() {
    let opts = RenderOptions {
        zoom: 4,
        arrow_gain: 2.0,
    };
    let img = render_field_image(&bare_result((0.0, 0.0)), None, &opts).unwrap();
    for y in 0..img.height {
        for x in 0..img.width {
            let inside = (8..12).contains(&y) && (12..16).contains(&x);
            assert_eq!(img.get(y, x), if inside { MARKER } else { [0, 0, 0] }, "({y}, {x})");
        }
    }
}

#[test]
fn east_arrow_lies_right_of_the_query() {
    let opts = RenderOptions {
        zoom: 4,
        arrow_gain: 2.0,
    };
    let img = render_field_image(&bare_result((0.0, 1.0)), None, &opts).unwrap();
    let arrow: Vec<(usize, usize)> = (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (y, x)))
        .filter(|&(y, x)| img.get(y, x) == ARROW_COLORS[0])
        .collect();
    assert!(!arrow.is_empty());
    assert!(arrow.iter().all(|&(y, x)| y == 10 && x >= 16));
}

#[test]
fn rendering_is_deterministic() {
    let mut rng = Rng::new(3);
    let layers = [trace(Tensor::randn([1, 9, 8, 8], 1.0, &mut rng), 1)];
    let fr = propagational_field(&layers, &FieldQuery::new(4, 4)).unwrap();
    let base: Vec<f64> = (0..64).map(|i| i as f64).collect();
    let opts = RenderOptions::default();
    assert_eq!(
        render_field_image(&fr, Some(&base), &opts).unwrap(),
        render_field_image(&fr, Some(&base), &opts).unwrap()
    );
}

#[test]
fn tracing_a_fresh_layer_records_zero_modulation() {
    let mut rng = Rng::new(4);
    let mut layer = PakaLayer::new(&PakaConfig::new(3, 4, ConvSpec::same(3, 2)), &mut rng).unwrap();
    let x = Tensor::randn([1, 3, 7, 7], 1.0, &mut rng);
    let traced = trace_attention(|g| {
        let xv = g.constant(x.clone());
        layer.forward(g, xv)
    })
    .unwrap();
    assert_eq!(traced.len(), 1);
    assert_eq!(traced[0].directional.dims(), [1, 9, 7, 7]);
    let fr = propagational_field(&traced, &FieldQuery::new(3, 3)).unwrap();
    assert_eq!(fr.shared_vector(), (0.0, 0.0));
}
