use sdtp_core::attention::AttentionWeights;
use sdtp_core::isp::{
    generate_states, isp_block, mma, sinusoidal_embedding, IspBlock, IspConfig, PosEmbed,
    ReceptiveStates,
};
use sdtp_core::{AttentionActivation, FeatureMap, Graph, ParamStore, SeededRng, Tensor};

mod common;
use common::{attention_oracle, close, rows};

fn weights(c: usize, heads: usize, seed: u64) -> (ParamStore, AttentionWeights) {
    let mut store = ParamStore::new();
    let w = AttentionWeights::new(&mut store, &mut SeededRng::new(seed), "attn", c, heads).unwrap();
    (store, w)
}

fn random_map(c: usize, h: usize, w: usize, rng: &mut SeededRng) -> FeatureMap {
    FeatureMap::from_tensor(rng.normal_tensor(&[c, h, w])).unwrap()
}

fn states(maps: Vec<FeatureMap>) -> ReceptiveStates {
    let rates = (0..maps.len()).map(|k| 1 + 2 * k).collect();
    ReceptiveStates {
        states: maps,
        rates,
    }
}

#[test]
fn dilated_state_support_plus_embedding() {
    let cfg = IspConfig {
        rates: vec![1, 3],
        heads: 1,
        ..IspConfig::default()
    };
    let mut store = ParamStore::new();
    let block = IspBlock::new(&mut store, &mut SeededRng::new(1), "isp", (1, 7, 7), &cfg).unwrap();
    let conv = &block.state_convs[1];
    *store.get_mut(conv.weight) = Tensor::full(&[1, 1, 3, 3], 1.0);
    store.get_mut(conv.bias.unwrap()).data_mut().fill(0.0);
    let mut x = FeatureMap::zeros(1, 7, 7);
    x.set(0, 3, 3, 1.0);
    let s = generate_states(&x, &block, &store).unwrap();
    assert_eq!(s.len(), 2);
    let pe = sinusoidal_embedding(1, 7, 7);
    for y in 0..7 {
        for xx in 0..7 {
            let v = s.states[1].at(0, y, xx) - pe.at(0, y, xx);
            let on = [0, 3, 6].contains(&y) && [0, 3, 6].contains(&xx);
            let want = if on { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "({y}, {xx})");
        }
    }
}

#[test]
fn default_rates_give_three_token_states() {
    let mut store = ParamStore::new();
    let cfg = IspConfig {
        heads: 2,
        ..IspConfig::default()
    };
    let block = IspBlock::new(&mut store, &mut SeededRng::new(2), "isp", (4, 3, 5), &cfg).unwrap();
    let x = random_map(4, 3, 5, &mut SeededRng::new(3));
    let s = generate_states(&x, &block, &store).unwrap();
    assert_eq!(s.rates, vec![1, 3, 6]);
    assert!(s.tokens().iter().all(|t| t.shape() == (15, 4)));
}

#[test]
fn single_state_is_self_attention() {
    let mut rng = SeededRng::new(5);
    let (store, w) = weights(6, 3, 6);
    let m = random_map(6, 2, 3, &mut rng);
    for act in [
        AttentionActivation::Softmax,
        AttentionActivation::Tanh,
        AttentionActivation::default(),
    ] {
        let s = states(vec![m.clone()]);
        let got = mma(&s, &w, &store, act).unwrap();
        let t = rows(&s.tokens()[0]);
        let want = attention_oracle(&t, &t, &w, &store, act);
        assert!(close(&rows(&got), &want, 1e-12));
    }
}

#[test]
fn identical_states_match_one_state_under_softmax() {
    let mut rng = SeededRng::new(7);
    let (store, w) = weights(4, 2, 8);
    let m = random_map(4, 2, 2, &mut rng);
    let one = mma(
        &states(vec![m.clone()]),
        &w,
        &store,
        AttentionActivation::Softmax,
    )
    .unwrap();
    let three = mma(
        &states(vec![m.clone(), m.clone(), m]),
        &w,
        &store,
        AttentionActivation::Softmax,
    )
    .unwrap();
    assert!(close(&rows(&one), &rows(&three), 1e-12));
}

#[test]
fn later_states_are_order_free_under_softmax() {
    let mut rng = SeededRng::new(9);
    let (store, w) = weights(4, 2, 10);
    let ms: Vec<FeatureMap> = (0..3).map(|_| random_map(4, 3, 3, &mut rng)).collect();
    let a = mma(
        &states(ms.clone()),
        &w,
        &store,
        AttentionActivation::Softmax,
    )
    .unwrap();
    let b = mma(
        &states(vec![ms[0].clone(), ms[2].clone(), ms[1].clone()]),
        &w,
        &store,
        AttentionActivation::Softmax,
    )
    .unwrap();
    assert!(close(&rows(&a), &rows(&b), 1e-12));
    // the query state is not interchangeable
    let c = mma(
        &states(vec![ms[1].clone(), ms[0].clone(), ms[2].clone()]),
        &w,
        &store,
        AttentionActivation::Softmax,
    )
    .unwrap();
    assert!(!close(&rows(&a), &rows(&c), 1e-6));
}

#[test]
fn token_permutation_equivariance() {
    let mut rng = SeededRng::new(11);
    let (store, w) = weights(4, 2, 12);
    let m = random_map(4, 1, 6, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted = FeatureMap::from_fn(4, 1, 6, |c, _, x| m.at(c, 0, perm[x]));
    for act in [AttentionActivation::Softmax, AttentionActivation::default()] {
        let a = mma(&states(vec![m.clone()]), &w, &store, act).unwrap();
        let b = mma(&states(vec![permuted.clone()]), &w, &store, act).unwrap();
        for (x, &src) in perm.iter().enumerate() {
            for (u, v) in b.row(x).iter().zip(a.row(src)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zeroed_block_is_identity_and_shape_is_kept() {
    let mut store = ParamStore::new();
    let block = IspBlock::new(
        &mut store,
        &mut SeededRng::new(13),
        "isp",
        (256, 8, 8),
        &IspConfig::default(),
    )
    .unwrap();
    let x = random_map(256, 8, 8, &mut SeededRng::new(14));
    let y = isp_block(&x, &block, &store, AttentionActivation::default()).unwrap();
    assert_eq!(y.shape(), (256, 8, 8));
    assert_ne!(y, x);
    block.zero_branches(&mut store);
    let y = isp_block(&x, &block, &store, AttentionActivation::default()).unwrap();
    assert_eq!(y, x);
}

#[test]
fn learned_and_disabled_embeddings() {
    for pe in [PosEmbed::Learned, PosEmbed::None] {
        let cfg = IspConfig {
            heads: 2,
            pos_embed: pe,
            ..IspConfig::default()
        };
        let mut store = ParamStore::new();
        let block =
            IspBlock::new(&mut store, &mut SeededRng::new(15), "isp", (4, 3, 3), &cfg).unwrap();
        assert_eq!(
            store.find("isp.pos_embed").is_some(),
            pe == PosEmbed::Learned
        );
        let x = random_map(4, 3, 3, &mut SeededRng::new(16));
        assert_eq!(
            isp_block(&x, &block, &store, AttentionActivation::default())
                .unwrap()
                .shape(),
            (4, 3, 3)
        );
    }
}

#[test]
fn squared_output_gradient_matches_finite_differences() {
    let cfg = IspConfig {
        heads: 2,
        ..IspConfig::default()
    };
    let mut store = ParamStore::new();
    let block = IspBlock::new(&mut store, &mut SeededRng::new(17), "isp", (4, 3, 3), &cfg).unwrap();
    let x0 = SeededRng::new(18).normal_tensor(&[4, 3, 3]);
    let loss = |x: &Tensor| -> (f64, Option<Tensor>) {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let y = block
            .forward(&mut g, &p, xv, AttentionActivation::default())
            .unwrap();
        let sq = g.mul(y, y).unwrap();
        let l = g.sum_all(sq);
        let grad = g.backward(l, Tensor::scalar(1.0)).unwrap().get(xv).cloned();
        (g.value(l).data()[0], grad)
    };
    let (_, grad) = loss(&x0);
    let grad = grad.unwrap();
    for i in 0..x0.len() {
        let h = 1e-5;
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
        let a = grad.data()[i];
        assert!(
            (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-4,
            "entry {i}: {a} vs {fd}"
        );
    }
}
