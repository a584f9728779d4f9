use milkit::autograd::{Graph, Reduction};
use milkit::heads::{AttentionPool, HeadVariant, MilHeadSpec};
use milkit::model::{Model, ModelSpec};
use milkit::nn::{BackboneSpec, ParamStore};
use milkit::Tensor;
use proptest::prelude::*;

const D: usize = 5;

fn spec(variant: HeadVariant, depth: usize, stages: Vec<usize>) -> ModelSpec {
    let mut head = MilHeadSpec::new(variant, 4);
    head.attention_dim = 6;
    head.depth = depth;
    head.num_heads = 2;
    ModelSpec {
        backbone: BackboneSpec::Mlp { input_dim: D, stage_dims: stages },
        head,
    }
}

fn model(variant: HeadVariant) -> Model<f64> {
    let stages = if variant == HeadVariant::PyramidTransformer { vec![6, 4] } else { vec![6] };
    Model::new(&spec(variant, 2, stages), 21).unwrap()
}

fn bag(k: usize, seed: u64) -> Tensor<f64> {
    let data = (0..k * D).map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.618)).sin() * 2.0).collect();
    Tensor::new([k, D], data).unwrap()
}

fn permute(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = x.shape()[1];
    let data = perm.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    Tensor::new([perm.len(), d], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bag_prediction_is_permutation_invariant(k in 1usize..10, seed in 0u64..1000, shift in 0usize..10) {
        let x = bag(k, seed);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.rotate_left(shift % k);
        perm.reverse();
        let y = permute(&x, &perm);
        for variant in HeadVariant::ALL {
            let m = model(variant);
            let a = m.infer(&x).unwrap();
            let b = m.infer(&y).unwrap();
            for (p, q) in a.bag_probs.iter().zip(&b.bag_probs) {
                prop_assert!((p - q).abs() < 1e-5, "{variant:?}: {p} vs {q}");
            }
            prop_assert_eq!(a.class, b.class);
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((a.attention[i] - b.attention[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_is_a_distribution(k in 1usize..12, seed in 0u64..1000) {
        let x = bag(k, seed);
        for variant in HeadVariant::ALL {
            let out = model(variant).infer(&x).unwrap();
            prop_assert!(out.attention.iter().all(|&a| a >= 0.0));
            prop_assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!((out.bag_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicating_instances_keeps_attention_logits(k in 1usize..8, seed in 0u64..1000) {
        let x = bag(k, seed);
        let doubled: Vec<usize> = (0..k).chain(0..k).collect();
        let m = model(HeadVariant::Attention);
        let a = m.infer(&x).unwrap();
        let b = m.infer(&permute(&x, &doubled)).unwrap();
        for (p, q) in a.bag_logits.iter().zip(&b.bag_logits) {
            prop_assert!((p - q).abs() < 1e-5);
        }
        for i in 0..k {
            prop_assert!((b.attention[i] - a.attention[i] / 2.0).abs() < 1e-9);
        }
    }
}

#[test]
fn depth_zero_transformer_is_attention_exactly() {
    let t = Model::<f64>::new(&spec(HeadVariant::Transformer, 0, vec![6]), 8).unwrap();
    let a = Model::<f64>::new(&spec(HeadVariant::Attention, 0, vec![6]), 8).unwrap();
    assert_eq!(t.params().count(), a.params().count());
    for k in [1, 3, 9] {
        let x = bag(k, k as u64);
        let (p, q) = (t.infer(&x).unwrap(), a.infer(&x).unwrap());
        assert_eq!(p.bag_logits, q.bag_logits);
        assert_eq!(p.attention, q.attention);
        assert_eq!(p.instance_probs, q.instance_probs);
    }
}

#[test]
fn single_scale_pyramid_is_transformer_exactly() {
    let p = Model::<f64>::new(&spec(HeadVariant::PyramidTransformer, 2, vec![6]), 4).unwrap();
    let t = Model::<f64>::new(&spec(HeadVariant::Transformer, 2, vec![6]), 4).unwrap();
    let x = bag(5, 2);
    assert_eq!(p.infer(&x).unwrap().bag_logits, t.infer(&x).unwrap().bag_logits);
}

#[test]
fn pyramid_levels_concatenate_scales() {
    let m = Model::<f64>::new(&spec(HeadVariant::PyramidTransformer, 1, vec![6, 4, 2]), 0).unwrap();
    assert_eq!(m.head().level_dims(), &[6, 10, 12]);
    let out = m.infer(&bag(3, 1)).unwrap();
    assert_eq!(out.self_attention.len(), 3);
}

#[test]
fn max_mil_gradient_reaches_only_the_selected_instance() {
    let m = model(HeadVariant::Max);
    for seed in 0..20 {
        let x = bag(6, seed);
        let chosen = m.infer(&x).unwrap().attention.iter().position(|&a| a == 1.0).unwrap();
        let mut g = Graph::<f64>::new();
        let p = m.bind(&mut g, true);
        let input = g.param(x.shape().to_vec(), x.data().to_vec()).unwrap();
        let out = m.forward_var(&mut g, &p, input).unwrap();
        let loss = g.cross_entropy(out.bag_logits, &[2], Reduction::Mean, None).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(input).unwrap();
        for k in 0..6 {
            let row = &grad[k * D..(k + 1) * D];
            if k == chosen {
                assert!(row.iter().any(|&v| v != 0.0));
            } else {
                assert!(row.iter().all(|&v| v == 0.0), "instance {k} got gradient");
            }
        }
    }
}

#[test]
fn max_mil_single_instance_bag_uses_its_logits() {
    let m = model(HeadVariant::Max);
    let out = m.infer(&bag(1, 3)).unwrap();
    let inst: f64 = out.instance_probs.iter().zip(&out.bag_probs).map(|(a, b)| (a - b).abs()).sum();
    assert!(inst < 1e-12);
    assert_eq!(out.attention, vec![1.0]);
}

#[test]
fn saturated_gate_reduces_to_plain_attention() {
    let mut gated_store = ParamStore::<f64>::new(5);
    let gated = AttentionPool::new(&mut gated_store, 3, 4, true);
    let mut plain_store = ParamStore::<f64>::new(5);
    let plain = AttentionPool::new(&mut plain_store, 3, 4, false);
    for p in gated_store.iter_mut().filter(|p| p.name.starts_with("head.pool.u")) {
        p.tensor.data_mut().fill(100.0);
    }
    let h: Vec<f64> = (0..15).map(|i| 0.1 + (i as f64 * 0.7).cos().abs()).collect();
    let run = |store: &ParamStore<f64>, pool: &AttentionPool| {
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let x = g.constant([5, 3], h.clone()).unwrap();
        let (_, a) = pool.forward(&mut g, &b, x).unwrap();
        g.value(a).to_vec()
    };
    let (a, b) = (run(&gated_store, &gated), run(&plain_store, &plain));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-3);
    }
}

#[test]
fn attention_pool_is_convex() {
    let mut store = ParamStore::<f64>::new(9);
    let pool = AttentionPool::new(&mut store, 3, 4, false);
    let h: Vec<f64> = (0..18).map(|i| (i as f64 * 1.3).sin()).collect();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x = g.constant([6, 3], h.clone()).unwrap();
    let (z, _) = pool.forward(&mut g, &b, x).unwrap();
    for (j, &zj) in g.value(z).iter().enumerate() {
        let col: Vec<f64> = (0..6).map(|k| h[k * 3 + j]).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo - 1e-12 <= zj && zj <= hi + 1e-12);
    }
}

#[test]
fn parameter_counts() {
    let (d, c, l) = (6, 4, 6);
    let backbone = D * d + d;
    let pool = d * l + l;
    let classifier = d * c + c;
    let block = |m: usize, f: usize| 4 * (m * m + m) + 4 * m + (m * f + f) + (f * m + m);
    let count = |v: HeadVariant, depth: usize| Model::<f64>::new(&spec(v, depth, vec![d]), 0).unwrap().params().count();
    assert_eq!(count(HeadVariant::Max, 2), backbone + classifier);
    assert_eq!(count(HeadVariant::Attention, 2), backbone + pool + classifier);
    assert_eq!(count(HeadVariant::GatedAttention, 2), backbone + pool + d * l + classifier);
    assert_eq!(count(HeadVariant::Transformer, 2), backbone + 2 * block(d, d) + pool + classifier);
    let pyr = Model::<f64>::new(&spec(HeadVariant::PyramidTransformer, 1, vec![6, 4]), 0).unwrap();
    let expected = (D * 6 + 6) + (6 * 4 + 4) + block(6, 6) + block(10, 10) + (10 * l + l) + (10 * c + c);
    assert_eq!(pyr.params().count(), expected);
}

#[test]
fn transformer_params_are_named_for_decay() {
    let m = Model::<f64>::new(&spec(HeadVariant::PyramidTransformer, 1, vec![6, 4]), 0).unwrap();
    let names = m.transformer_param_names();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| n.contains(".encoder.")));
    let all = m.params().iter().filter(|p| p.name.contains(".encoder.")).count();
    assert_eq!(all, names.len());
}
