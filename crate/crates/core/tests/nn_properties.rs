use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlgrasp::nn::{
    grad_check, softmax, Adam, AttentionConfig, CrossAttention, GradCheckConfig, Graph, LayerNorm, Linear, Mlp,
    ParamStore, Segments, Tensor2, Var,
};
use vlgrasp::Result;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn attention_config(width: usize, heads: usize) -> AttentionConfig {
    AttentionConfig {
        width,
        heads,
        layers: 1,
        scale: true,
        ffn_mult: 2,
    }
}

fn run_attention(store: &ParamStore<f64>, att: &CrossAttention, q: &Tensor2<f64>, kv: &Tensor2<f64>) -> Tensor2<f64> {
    let mut g = Graph::new(store);
    let (qv, kv_var) = (g.constant(q.clone()), g.constant(kv.clone()));
    let vv = g.constant(kv.map(|x| 0.5 * x - 0.1));
    let out = att
        .forward(&mut g, qv, kv_var, vv, &Segments::single(q.rows()), &Segments::single(kv.rows()))
        .unwrap();
    g.value(out.features).clone()
}

/// Weighted sum of every output entry, so each entry matters to the gradient.
fn probe_loss(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(y).shape();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), r, c);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_config() -> GradCheckConfig {
    GradCheckConfig::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_is_invariant_to_key_order_and_equivariant_in_queries(
        seed in any::<u64>(),
        k in 1usize..6,
        n in 1usize..6,
        heads in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = CrossAttention::new(&mut store, "att", attention_config(8, heads), &mut rng).unwrap();
        let q = random_tensor(&mut rng, k, 8);
        let kv = random_tensor(&mut rng, n, 8);
        let base = run_attention(&store, &att, &q, &kv);

        let mut kv_perm: Vec<usize> = (0..n).collect();
        kv_perm.shuffle(&mut rng);
        let shuffled_kv = run_attention(&store, &att, &q, &kv.select_rows(&kv_perm));
        prop_assert!(base.max_abs_diff(&shuffled_kv) <= 1e-12);

        let mut q_perm: Vec<usize> = (0..k).collect();
        q_perm.shuffle(&mut rng);
        let shuffled_q = run_attention(&store, &att, &q.select_rows(&q_perm), &kv);
        prop_assert!(base.select_rows(&q_perm).max_abs_diff(&shuffled_q) <= 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let p = softmax(&logits).unwrap();
        prop_assert_eq!(p.len(), logits.len());
        prop_assert!(p.iter().all(|&x| x.is_finite() && x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // the arg max always keeps positive mass
        let top = logits.iter().cloned().fold(f64::MIN, f64::max);
        let i = logits.iter().position(|&x| x == top).unwrap();
        prop_assert!(p[i] > 0.0);
    }

    #[test]
    fn adam_with_zero_gradients_leaves_parameters(seed in any::<u64>(), warmup in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng);
        let ids = vec![lin.weight, lin.bias];
        let mut adam = Adam::new(&store, ids.clone(), 1e-2);
        for step in 0..warmup {
            let x = random_tensor(&mut rng, 4, 3);
            let grads = {
                let mut g = Graph::new(&store);
                let xv = g.constant(x);
                let y = lin.forward(&mut g, xv).unwrap();
                let l = probe_loss(&mut g, y, step as u64).unwrap();
                g.backward(l).unwrap()
            };
            store.zero_grads();
            store.accumulate(&grads);
            adam.step(&mut store).unwrap();
        }
        let before = store.to_named();
        store.zero_grads();
        adam.step(&mut store).unwrap();
        prop_assert_eq!(store.to_named(), before);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn linear_gradients_match_finite_differences(seed in any::<u64>(), rows in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 3, &mut rng);
        let x = store.add("x", random_tensor(&mut rng, rows, 5));
        let report = grad_check(&store, None, |g: &mut Graph<'_, f64>| {
            let xv = g.param(x);
            let y = lin.forward(g, xv)?;
            probe_loss(g, y, seed)
        }, check_config()).unwrap();
        prop_assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn mlp_gradients_match_finite_differences(seed in any::<u64>(), rows in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[4, 7, 6, 2], &mut rng);
        let x = store.add("x", random_tensor(&mut rng, rows, 4));
        let report = grad_check(&store, None, |g: &mut Graph<'_, f64>| {
            let xv = g.param(x);
            let y = mlp.forward(g, xv)?;
            probe_loss(g, y, seed)
        }, check_config()).unwrap();
        prop_assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences(seed in any::<u64>(), rows in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape();
            *store.value_mut(id) = random_tensor(&mut rng, shape.0, shape.1);
        }
        let x = store.add("x", random_tensor(&mut rng, rows, 6));
        let report = grad_check(&store, None, |g: &mut Graph<'_, f64>| {
            let xv = g.param(x);
            let y = ln.forward(g, xv)?;
            probe_loss(g, y, seed)
        }, check_config()).unwrap();
        prop_assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences(
        seed in any::<u64>(),
        ks in prop::collection::vec(1usize..4, 1..3),
        ns in prop::collection::vec(1usize..4, 3),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = CrossAttention::new(&mut store, "att", attention_config(8, 2), &mut rng).unwrap();
        let ns = &ns[..ks.len()];
        let (q_segs, kv_segs) = (Segments::from_lengths(&ks), Segments::from_lengths(ns));
        let q = store.add("q", random_tensor(&mut rng, q_segs.total(), 8));
        let k = store.add("k", random_tensor(&mut rng, kv_segs.total(), 8));
        let v = store.add("v", random_tensor(&mut rng, kv_segs.total(), 8));
        let report = grad_check(&store, None, |g: &mut Graph<'_, f64>| {
            let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
            let out = att.forward(g, qv, kv, vv, &q_segs, &kv_segs)?;
            probe_loss(g, out.features, seed)
        }, check_config()).unwrap();
        prop_assert!(report.passes(1e-4), "{report:?}");
    }
}
