use sdtp_core::cdi::CdiConfig;
use sdtp_core::isp::IspConfig;
use sdtp_core::ops::{self, KernelWeights};
use sdtp_core::{
    build_variant, cross_level_sensitivity, sdtp_forward, AttentionActivation, FeatureMap,
    FeaturePyramid, Graph, Pipeline, PipelineConfig, PyramidShape, SeededRng, Tensor, Variant,
};

fn config(variant: Variant, channels: usize, levels: Vec<usize>, seed: u64) -> PipelineConfig {
    PipelineConfig {
        variant,
        channels,
        isp: IspConfig {
            heads: 2,
            ..IspConfig::default()
        },
        cdi: CdiConfig {
            heads: 2,
            levels,
            ..CdiConfig::default()
        },
        activation: AttentionActivation::default(),
        seed,
    }
}

fn four_levels(variant: Variant) -> (Pipeline, FeaturePyramid) {
    let shape = PyramidShape::halving(2, 8, 8, &[3, 4, 5, 6]);
    let pipeline = build_variant(&config(variant, 4, vec![2, 3, 4, 5], 21), &shape).unwrap();
    let pyramid = shape.synthesize(&mut SeededRng::new(22));
    (pipeline, pyramid)
}

fn weights(p: &Pipeline, name: &str) -> KernelWeights {
    let w = p
        .store
        .get(p.store.find(&format!("{name}.weight")).unwrap())
        .clone();
    let b = p
        .store
        .get(p.store.find(&format!("{name}.bias")).unwrap())
        .clone();
    KernelWeights::new(w).unwrap().with_bias(b)
}

fn nearest_up(m: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(m.shape().0, h, w, |c, y, x| m.at(c, y / 2, x / 2))
}

fn add(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let (c, h, w) = a.shape();
    FeatureMap::from_fn(c, h, w, |ch, y, x| a.at(ch, y, x) + b.at(ch, y, x))
}

#[test]
fn full_width_shapes_are_preserved() {
    let shape = PyramidShape::halving(2, 32, 32, &[256; 4]);
    let cfg = PipelineConfig {
        seed: 1,
        ..PipelineConfig::default()
    };
    let p = build_variant(&cfg, &shape).unwrap();
    let x = shape.synthesize(&mut SeededRng::new(2));
    let (y, dep) = sdtp_forward(&x, &p).unwrap();
    assert_eq!(y.shape(), shape);
    assert!(dep > 0.0);
}

#[test]
fn two_level_fpn_matches_hand_written_reference() {
    let shape = PyramidShape::halving(2, 6, 5, &[3, 5]);
    let p = build_variant(&config(Variant::FpnBaseline, 4, vec![2, 3], 3), &shape).unwrap();
    let x = shape.synthesize(&mut SeededRng::new(4));
    let (got, dep) = p.forward(&x).unwrap();
    assert_eq!(dep, 0.0);

    let l2 = ops::conv2d(x.level(2).unwrap(), &weights(&p, "lateral.2"), (1, 1)).unwrap();
    let l3 = ops::conv2d(x.level(3).unwrap(), &weights(&p, "lateral.3"), (1, 1)).unwrap();
    let p3 = ops::conv2d(&l3, &weights(&p, "smooth.3"), (1, 1)).unwrap();
    let p2 = ops::conv2d(
        &add(&l2, &nearest_up(&p3, 6, 5)),
        &weights(&p, "smooth.2"),
        (1, 1),
    )
    .unwrap();
    for (a, b) in [(got.level(2).unwrap(), &p2), (got.level(3).unwrap(), &p3)] {
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(u, v)| (u - v).abs() < 1e-12));
    }
}

#[test]
fn zeroed_transformer_branches_reduce_to_baseline() {
    let shape = PyramidShape::halving(2, 4, 4, &[3, 3]);
    let mut sdtp = build_variant(&config(Variant::Sdtp, 4, vec![2, 3], 5), &shape).unwrap();
    let fpn = build_variant(&config(Variant::FpnBaseline, 4, vec![2, 3], 5), &shape).unwrap();
    let x = shape.synthesize(&mut SeededRng::new(6));
    let (before, _) = sdtp.forward(&x).unwrap();
    let (reference, _) = fpn.forward(&x).unwrap();
    assert_ne!(before, reference);
    sdtp.zero_transformer_branches();
    let (after, _) = sdtp.forward(&x).unwrap();
    for (a, b) in after.maps().iter().zip(reference.maps()) {
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(u, v)| (u - v).abs() < 1e-12));
    }
}

#[test]
fn no_interaction_is_isolated_per_level() {
    let (p, x) = four_levels(Variant::NoInteraction);
    for from in 2..=5 {
        for to in 2..=5 {
            let s = cross_level_sensitivity(&p, &x, from, to, 1.0).unwrap();
            assert_eq!(s == 0.0, from != to, "{from} -> {to}: {s}");
        }
    }
}

#[test]
fn sdtp_connects_every_level_pair() {
    let (p, x) = four_levels(Variant::Sdtp);
    for from in 2..=5 {
        for to in 2..=5 {
            let s = cross_level_sensitivity(&p, &x, from, to, 1.0).unwrap();
            assert!(s > 1e-9, "{from} -> {to}: {s}");
        }
    }
}

#[test]
fn top_cell_moves_its_whole_upsample_cone() {
    let (p, x) = four_levels(Variant::Sdtp);
    let (base, _) = p.forward(&x).unwrap();
    let mut probe = x.clone();
    let top = probe.level_mut(5).unwrap();
    top.set(0, 0, 0, top.at(0, 0, 0) + 1.0);
    let (moved, _) = p.forward(&probe).unwrap();
    let (a, b) = (base.level(2).unwrap(), moved.level(2).unwrap());
    // level-5 cell (0, 0) covers the 8x8 block at the origin of level 2
    for y in 0..8 {
        for xx in 0..8 {
            let changed = (0..4).any(|c| a.at(c, y, xx) != b.at(c, y, xx));
            assert!(changed, "({y}, {xx})");
        }
    }
}

#[test]
fn single_input_ignores_other_levels() {
    let (p, x) = four_levels(Variant::SingleInput(5));
    for from in 2..=4 {
        for to in 2..=5 {
            assert_eq!(cross_level_sensitivity(&p, &x, from, to, 1.0).unwrap(), 0.0);
        }
    }
    for to in 2..=5 {
        assert!(cross_level_sensitivity(&p, &x, 5, to, 1.0).unwrap() > 0.0);
    }
}

#[test]
fn dilated_top_differs_from_baseline_only_through_the_extra_branch() {
    let (mut dil, x) = four_levels(Variant::DilatedC5);
    let (base, _) = four_levels(Variant::FpnBaseline);
    let (a, _) = dil.forward(&x).unwrap();
    let (b, _) = base.forward(&x).unwrap();
    assert_ne!(a, b);
    dil.store.zero_matching(&["dilated."]);
    let (a, _) = dil.forward(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn every_variant_is_deterministic() {
    for variant in Variant::all(2..=5) {
        let (p1, x) = four_levels(variant);
        let (p2, _) = four_levels(variant);
        assert_eq!(
            p1.forward(&x).unwrap(),
            p2.forward(&x).unwrap(),
            "{}",
            variant.name()
        );
    }
}

#[test]
fn total_loss_gradient_wrt_bottom_entry() {
    let shape = PyramidShape::halving(2, 4, 4, &[3, 3, 3, 3]);
    let p = build_variant(&config(Variant::Sdtp, 4, vec![2, 3, 4, 5], 7), &shape).unwrap();
    let x = shape.synthesize(&mut SeededRng::new(8));
    let target = PyramidShape::halving(2, 4, 4, &[4; 4]).synthesize(&mut SeededRng::new(9));
    let lambda = 0.01;
    let total = |pyr: &FeaturePyramid| -> (f64, Tensor) {
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let xs: Vec<_> = pyr
            .maps()
            .iter()
            .map(|m| g.leaf(m.tensor().clone()))
            .collect();
        let out = p.forward_on(&mut g, &b, &xs).unwrap();
        let mut acc = g.scale(out.dep_loss.unwrap(), lambda);
        for (&y, t) in out.levels.iter().zip(target.maps()) {
            let tv = g.leaf(t.tensor().clone());
            let d = g.sub(y, tv).unwrap();
            let d2 = g.mul(d, d).unwrap();
            let s = g.sum_all(d2);
            acc = g.add(acc, s).unwrap();
        }
        let grads = g.backward(acc, Tensor::scalar(1.0)).unwrap();
        (g.value(acc).data()[0], grads.get(xs[0]).unwrap().clone())
    };
    let (_, grad) = total(&x);
    let mut rng = SeededRng::new(10);
    for _ in 0..5 {
        let (c, y, xx) = (
            (rng.uniform(0.0, 3.0) as usize).min(2),
            (rng.uniform(0.0, 4.0) as usize).min(3),
            (rng.uniform(0.0, 4.0) as usize).min(3),
        );
        let h = 1e-5;
        let mut plus = x.clone();
        let m = plus.level_mut(2).unwrap();
        m.set(c, y, xx, m.at(c, y, xx) + h);
        let mut minus = x.clone();
        let m = minus.level_mut(2).unwrap();
        m.set(c, y, xx, m.at(c, y, xx) - h);
        let fd = (total(&plus).0 - total(&minus).0) / (2.0 * h);
        let a = grad.data()[(c * 4 + y) * 4 + xx];
        assert!(
            (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-4,
            "{a} vs {fd}"
        );
    }
}

#[test]
fn mismatched_inputs_name_the_operation() {
    let (p, _) = four_levels(Variant::Sdtp);
    let wrong = PyramidShape::halving(2, 8, 8, &[3, 4, 5, 7]).synthesize(&mut SeededRng::new(1));
    let err = p.forward(&wrong).unwrap_err();
    assert_eq!(err.origin(), "sdtp_forward");
}
