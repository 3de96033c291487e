use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqa_core::attention::{attend, head_prefix, pool, AttentionConfig, AttentionParams, Normalization};
use vqa_core::autodiff::ParamStore;
use vqa_core::gradcheck::{grad_check, GraphObjective};
use vqa_core::tensor::{Act, Activation, Tensor};

struct Instance {
    cfg: AttentionConfig,
    params: AttentionParams,
    features: Tensor,
    question: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn instance(seed: u64, k: usize, heads: usize, normalization: Normalization, weight_norm: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dv, h, width) = (rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(2..9));
    let cfg = AttentionConfig {
        heads,
        normalization,
        width,
        use_fc: rng.gen_bool(0.7),
        renormalize: false,
        activation: None,
    };
    let mut params = AttentionParams::random(&cfg, dv, h, weight_norm, &mut rng);
    randomize_biases(&mut params.store, &mut rng);
    Instance {
        features: Tensor::matrix(k, dv, uniform(&mut rng, k * dv, 2.0)).unwrap(),
        question: Tensor::vector(uniform(&mut rng, h, 2.0)),
        cfg,
        params,
    }
}

fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
}

const LEAKY: Act = Act {
    kind: Activation::LeakyRelu,
    slope: 0.1,
};

fn normalization() -> impl Strategy<Value = Normalization> {
    prop_oneof![Just(Normalization::Softmax), Just(Normalization::Sigmoid)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_weights_sum_to_head_count(seed in any::<u64>(), k in 1usize..10, heads in 1usize..4) {
        let inst = instance(seed, k, heads, Normalization::Softmax, true);
        let out = attend(&inst.cfg, LEAKY, &inst.params, &inst.features, &inst.question).unwrap();
        prop_assert!((out.alpha.sum() - heads as f64).abs() <= 1e-8);
        prop_assert!(out.alpha.data().iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn each_softmax_head_is_on_the_simplex(seed in any::<u64>(), k in 1usize..10, heads in 1usize..4) {
        let inst = instance(seed, k, heads, Normalization::Softmax, seed % 2 == 0);
        let out = attend(&inst.cfg, LEAKY, &inst.params, &inst.features, &inst.question).unwrap();
        for w in &out.head_weights {
            prop_assert!((w.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(w.data().iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn weights_are_nonnegative_for_both_normalizations(
        seed in any::<u64>(),
        k in 1usize..10,
        heads in 1usize..4,
        norm in normalization(),
    ) {
        let inst = instance(seed, k, heads, norm, true);
        let out = attend(&inst.cfg, LEAKY, &inst.params, &inst.features, &inst.question).unwrap();
        prop_assert!(out.alpha.data().iter().all(|&a| a >= 0.0));
        if norm == Normalization::Sigmoid {
            for w in &out.head_weights {
                prop_assert!(w.data().iter().all(|&a| a > 0.0 && a < 1.0));
            }
        }
    }

    #[test]
    fn permuting_regions_permutes_weights(
        seed in any::<u64>(),
        k in 1usize..9,
        heads in 1usize..4,
        norm in normalization(),
    ) {
        let inst = instance(seed, k, heads, norm, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| inst.features.row(p).to_vec()).collect();
        let permuted = Tensor::from_rows(&rows);
        let a = attend(&inst.cfg, LEAKY, &inst.params, &inst.features, &inst.question).unwrap();
        let b = attend(&inst.cfg, LEAKY, &inst.params, &permuted, &inst.question).unwrap();
        for (wa, wb) in a.head_weights.iter().zip(&b.head_weights) {
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((wb.data()[i] - wa.data()[p]).abs() <= 1e-10);
            }
        }
        prop_assert!(a.pooled.max_abs_diff(&b.pooled) <= 1e-10);
    }

    #[test]
    fn pool_is_linear_in_weights_and_features(seed in any::<u64>(), k in 1usize..10, dv in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::matrix(k, dv, uniform(&mut rng, k * dv, 5.0)).unwrap();
        let v2 = Tensor::matrix(k, dv, uniform(&mut rng, k * dv, 5.0)).unwrap();
        let a1 = Tensor::vector(uniform(&mut rng, k, 2.0));
        let a2 = Tensor::vector(uniform(&mut rng, k, 2.0));
        let a12 = Tensor::vector(a1.data().iter().zip(a2.data()).map(|(x, y)| x + y).collect());
        let lhs = pool(&v, &a12).unwrap();
        let p1 = pool(&v, &a1).unwrap();
        let p2 = pool(&v, &a2).unwrap();
        for i in 0..dv {
            prop_assert!((lhs.data()[i] - p1.data()[i] - p2.data()[i]).abs() <= 1e-10);
        }
        let vsum = Tensor::matrix(
            k,
            dv,
            v.data().iter().zip(v2.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let lhs = pool(&vsum, &a1).unwrap();
        let q2 = pool(&v2, &a1).unwrap();
        for i in 0..dv {
            prop_assert!((lhs.data()[i] - p1.data()[i] - q2.data()[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn softmax_ignores_the_score_bias(seed in any::<u64>(), k in 1usize..10, heads in 1usize..4, shift in -20.0f64..20.0) {
        let inst = instance(seed, k, heads, Normalization::Softmax, true);
        let before = attend(&inst.cfg, LEAKY, &inst.params, &inst.features, &inst.question).unwrap();
        let mut shifted = inst.params.clone();
        let head = (seed % heads as u64) as usize;
        let bias = format!("{}.score.bias", head_prefix(&shifted.prefix, head));
        shifted.store.get_mut(&bias).unwrap().data_mut()[0] += shift;
        let after = attend(&inst.cfg, LEAKY, &shifted, &inst.features, &inst.question).unwrap();
        for (a, b) in before.head_weights.iter().zip(&after.head_weights) {
            prop_assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }
}

/// Finite differences through the whole block for both normalizations.
#[test]
fn attend_block_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let norm = if seed % 2 == 0 {
            Normalization::Softmax
        } else {
            Normalization::Sigmoid
        };
        let inst = instance(seed, 4, 1 + (seed % 3) as usize, norm, seed % 4 < 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let probe = Tensor::matrix(1, inst.features.cols(), uniform(&mut rng, inst.features.cols(), 1.0)).unwrap();
        let (cfg, features, question) = (inst.cfg.clone(), inst.features.clone(), inst.question.clone());
        let mut objective = GraphObjective(|g: &mut vqa_core::autodiff::Graph, store: &ParamStore| {
            let v = g.param("features", store.get("features")?.clone(), true);
            let q = g.param("question", store.get("question")?.clone(), true);
            let nodes = vqa_core::attention::attend_nodes(g, store, "att", &cfg, LEAKY, v, q, features.rows())?;
            let w = g.constant(probe.clone());
            let y = g.mul(nodes.pooled, w)?;
            Ok(g.sum(y))
        });
        let mut store = inst.params.store.clone();
        store.insert("features", features.clone());
        store.insert("question", question.reshape(&[1, question.len()]).unwrap());
        let report = grad_check(&mut objective, &store, 1e-5).unwrap();
        // Per head: the softmax score bias has an identically zero gradient,
        // so on its own it only measures rounding noise.
        let groups = report.grouped(|name| name.split('.').take(2).collect::<Vec<_>>().join("."));
        for (group, err) in groups {
            assert!(err < 1e-4, "seed {seed} {group}: {err:e}");
        }
    }
}
