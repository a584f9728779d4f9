//! End-to-end acceptance checks. Each criterion prints one `PASS` or `FAIL`
//! line; the process exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use milkit::autograd::{Graph, Reduction};
use milkit::bagsynth::{self, generate, BagRecipe, Manifest};
use milkit::gradcheck;
use milkit::harness::{cross_validate, Checkpoint, DataSource, TrainConfig};
use milkit::heads::{HeadVariant, MilHeadSpec};
use milkit::metrics::{accuracy, auc_macro_ovr, qwk};
use milkit::model::{Model, ModelSpec};
use milkit::nn::BackboneSpec;
use milkit::par;
use milkit::pseudolabel::{assign_pseudo_labels, ensemble_infer, labelled_per_end, pseudo_label_round, BagEnsemble, EnsembleInference, LabelSource, RoundOptions};
use milkit::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const BAGS: usize = 2000;
const K: usize = 16;
const EPOCHS: usize = 20;
const WIDTH: usize = 16;

type Verdict = (bool, String);
type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("MIL invariants", mil_invariants),
        ("pseudo-label assignment contract", assignment_contract),
        ("ordering ablation", ordering_ablation),
        ("pseudo-label round", pseudo_label_rounds),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = check();
        println!("{} {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn spec(variant: HeadVariant, input_dim: usize, classes: usize) -> ModelSpec {
    let mut head = MilHeadSpec::new(variant, classes);
    head.attention_dim = WIDTH;
    head.depth = 1;
    head.num_heads = 2;
    ModelSpec {
        backbone: BackboneSpec::Mlp { input_dim, stage_dims: vec![WIDTH] },
        head,
    }
}

fn desk_config(variant: HeadVariant, recipe: &BagRecipe) -> TrainConfig {
    let mut cfg = TrainConfig::new(spec(variant, recipe.feature_dim, recipe.num_classes()), DataSource::Recipe(recipe.clone()));
    cfg.epochs = EPOCHS;
    cfg.lr = 1e-3;
    cfg.transformer_lr = 1e-3;
    cfg.seed = recipe.seed;
    cfg
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let results = match gradcheck::suite(100, 0) {
        Ok(r) => r,
        Err(e) => return (false, format!("suite errored: {e}")),
    };
    let elapsed = start.elapsed();
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| format!("{} ({:.2e})", r.name, r.max_rel_err)).collect();
    let ok = failed.is_empty() && elapsed < Duration::from_secs(120) && results.iter().all(|r| r.trials == 100);
    (ok, format!("{} cases x 100 trials, failures {failed:?}, {:.1}s of 120s", results.len(), elapsed.as_secs_f64()))
}

fn metric_oracles() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut mismatched = Vec::new();
    for seed in 0..200 {
        let c = common::random_case(seed);
        let acc = accuracy(&c.targets, &c.preds).unwrap();
        worst = worst.max((acc - common::accuracy(&c.targets, &c.preds)).abs());
        for (ours, oracle) in [
            (qwk(&c.targets, &c.preds, c.classes).ok(), common::qwk(&c.targets, &c.preds)),
            (auc_macro_ovr(&c.targets, &c.probs, c.classes).ok(), common::auc(&c.targets, &c.probs, c.classes)),
        ] {
            match (ours, oracle) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => mismatched.push(seed),
            }
        }
        if qwk(&c.targets, &c.targets, c.classes).ok() != Some(1.0) {
            mismatched.push(seed);
        }
    }
    (worst <= 1e-12 && mismatched.is_empty(), format!("200 cases, max abs diff {worst:.1e}, mismatched seeds {mismatched:?}"))
}

fn random_bag(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Tensor<f64> {
    Tensor::new([k, d], (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn mil_invariants() -> Verdict {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut attn_err, mut perm_err): (f64, f64) = (0.0, 0.0);
    let mut negative = 0;
    for variant in HeadVariant::ALL {
        let mut s = spec(variant, d, 4);
        if variant == HeadVariant::PyramidTransformer {
            s.backbone = BackboneSpec::Mlp { input_dim: d, stage_dims: vec![8, 6] };
        }
        let model = Model::<f64>::new(&s, 3).unwrap();
        for _ in 0..40 {
            let k = rng.random_range(1..=16);
            let x = random_bag(&mut rng, k, d);
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let y = Tensor::new([k, d], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
            let (a, b) = (model.infer(&x).unwrap(), model.infer(&y).unwrap());
            negative += a.attention.iter().filter(|&&w| w < 0.0).count();
            attn_err = attn_err.max((a.attention.iter().sum::<f64>() - 1.0).abs());
            for (p, q) in a.bag_probs.iter().zip(&b.bag_probs) {
                perm_err = perm_err.max((p - q).abs());
            }
        }
    }

    let t = Model::<f64>::new(&ModelSpec { head: MilHeadSpec { depth: 0, ..spec(HeadVariant::Transformer, d, 4).head }, ..spec(HeadVariant::Transformer, d, 4) }, 5).unwrap();
    let a = Model::<f64>::new(&spec(HeadVariant::Attention, d, 4), 5).unwrap();
    let mut depth_zero_equal = true;
    for _ in 0..20 {
        let k = rng.random_range(1..=16);
        let x = random_bag(&mut rng, k, d);
        let (p, q) = (t.infer(&x).unwrap(), a.infer(&x).unwrap());
        depth_zero_equal &= p.bag_logits == q.bag_logits && p.attention == q.attention;
    }

    let max = Model::<f64>::new(&spec(HeadVariant::Max, d, 4), 7).unwrap();
    let mut leaked = 0;
    for _ in 0..20 {
        let k = rng.random_range(2..=16);
        let x = random_bag(&mut rng, k, d);
        let mut g = Graph::<f64>::new();
        let p = max.bind(&mut g, true);
        let input = g.param(vec![k, d], x.data().to_vec()).unwrap();
        let out = max.forward_var(&mut g, &p, input).unwrap();
        let loss = g.cross_entropy(out.bag_logits, &[1], Reduction::Mean, None).unwrap();
        g.backward(loss).unwrap();
        let chosen = max.infer(&x).unwrap().attention.iter().position(|&w| w == 1.0).unwrap();
        let grad = g.grad(input).unwrap();
        leaked += (0..k).filter(|&i| i != chosen && grad[i * d..(i + 1) * d].iter().any(|&v| v != 0.0)).count();
    }

    let ok = negative == 0 && attn_err <= 1e-6 && perm_err <= 1e-5 && depth_zero_equal && leaked == 0;
    (
        ok,
        format!(
            "5 heads x 40 bags: negative weights {negative}, |sum-1| {attn_err:.1e}, permutation diff {perm_err:.1e}; depth-0 exact {depth_zero_equal}; max-MIL leaked rows {leaked}"
        ),
    )
}

fn assignment_contract() -> Verdict {
    let recipe = BagRecipe { k_min: 2, k_max: 40, ..BagRecipe::max_rule(1000, 16, 4, 5) };
    let bags = generate(&recipe).unwrap();
    let models: Vec<Model<f32>> = (0..3).map(|s| Model::new(&spec(HeadVariant::Attention, recipe.feature_dim, 4), s).unwrap()).collect();
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let inference = ensemble_infer(&refs, &bags).unwrap();
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let records = assign_pseudo_labels(&inference, &labels).unwrap();
    let c = inference.classes;

    let mut violations = 0;
    let mut offset = 0;
    let negatives = labels.iter().filter(|&&l| l == 0).count();
    for (bag, inf) in bags.iter().zip(&inference.bags) {
        let k = bag.len();
        let rs = &records[offset..offset + k];
        offset += k;
        let indexed = rs.iter().enumerate().all(|(i, r)| r.instance_idx == i && r.bag_id == bag.id);
        let sum_ok = (inf.attention.iter().sum::<f64>() - 1.0).abs() <= 1e-6;
        let ok = if bag.label == 0 {
            rs.iter().all(|r| r.label == Some(0) && r.source == LabelSource::ForcedZeroNegativeBag)
        } else {
            let m = std::cmp::max(1, k / 10);
            let top: Vec<usize> = (0..k).filter(|&i| rs[i].source == LabelSource::EnsembleTop).collect();
            let bottom: Vec<usize> = (0..k).filter(|&i| rs[i].source == LabelSource::ForcedZeroLowAttention).collect();
            let rest: Vec<usize> = (0..k).filter(|i| !top.contains(i) && !bottom.contains(i)).collect();
            let a = &inf.attention;
            top.len() == m
                && bottom.len() == m
                && rest.iter().all(|&i| rs[i].label.is_none() && rs[i].source == LabelSource::Unknown)
                && top.iter().all(|&t| (0..k).filter(|i| !top.contains(i)).all(|j| a[t] >= a[j]))
                && bottom.iter().all(|&b| (0..k).filter(|i| !bottom.contains(i)).all(|j| a[b] <= a[j]))
                && top.iter().all(|&t| {
                    let row = &inf.instance_probs[t * c..(t + 1) * c];
                    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    rs[t].label.is_some_and(|l| row[l] == best)
                })
                && bottom.iter().all(|&b| rs[b].label == Some(0))
        };
        violations += usize::from(!(ok && indexed && sum_ok));
    }
    let complete = offset == records.len();

    let mut boundary = Vec::new();
    for k in 1..=12usize {
        let attention: Vec<f64> = (0..k).map(|i| (i + 1) as f64).collect();
        let total: f64 = attention.iter().sum();
        let inf = EnsembleInference {
            members: 1,
            classes: 3,
            bags: vec![BagEnsemble {
                bag_id: 0,
                attention: attention.iter().map(|a| a / total).collect(),
                instance_probs: (0..k).flat_map(|_| [0.1, 0.2, 0.7]).collect(),
            }],
        };
        let rs = assign_pseudo_labels(&inf, &[1]).unwrap();
        let count = |s: LabelSource| rs.iter().filter(|r| r.source == s).count();
        let m = if k == 1 { 0 } else { 1 };
        let expected = (m, m, k - 2 * m);
        let got = (count(LabelSource::EnsembleTop), count(LabelSource::ForcedZeroLowAttention), count(LabelSource::Unknown));
        boundary.push(labelled_per_end(k) == 1 && got == expected && (k == 1 || rs[k - 1].label == Some(2)));
    }
    let boundary_ok = boundary.iter().all(|&b| b);
    (
        violations == 0 && complete && boundary_ok && negatives > 0 && negatives < bags.len(),
        format!("{} bags ({negatives} negative), violations {violations}; K=1..12 boundary cases {boundary:?}", bags.len()),
    )
}

fn ordering_ablation() -> Verdict {
    let start = Instant::now();
    let mut grade = Vec::new();
    for variant in [HeadVariant::Max, HeadVariant::Attention, HeadVariant::Transformer] {
        let mut qs = Vec::new();
        for seed in 0..SEEDS {
            let recipe = BagRecipe::two_pattern_grade(BAGS, K, seed);
            let bags = generate(&recipe).unwrap();
            qs.push(cross_validate(&desk_config(variant, &recipe), &bags, variant.label()).unwrap().report.mean.qwk);
        }
        grade.push(mean(&qs));
    }
    let mut max_rule = Vec::new();
    for seed in 0..SEEDS {
        let recipe = BagRecipe::max_rule(BAGS, K, 4, seed);
        let bags = generate(&recipe).unwrap();
        max_rule.push(cross_validate(&desk_config(HeadVariant::Attention, &recipe), &bags, "Attention MIL").unwrap().report.mean.qwk);
    }
    let max_rule = mean(&max_rule);
    let (m, a, t) = (grade[0], grade[1], grade[2]);
    let elapsed = start.elapsed();
    let ok = t >= a + 0.03 && a >= m && max_rule >= 0.90 && elapsed <= Duration::from_secs(30 * 60);
    (
        ok,
        format!("grade QWK max {m:.4} attention {a:.4} transformer {t:.4} (margin {:.4}); max-rule attention {max_rule:.4}", t - a),
    )
}

fn pseudo_label_rounds() -> Verdict {
    let opts = |agreement| RoundOptions { folds: Some(vec![0]), agreement };
    let round_config = |variant, recipe: &BagRecipe| {
        let mut cfg = desk_config(variant, recipe);
        cfg.lambda = 1.0;
        cfg.patch_reduction = Reduction::Mean;
        cfg
    };
    let (mut deltas, mut changed, mut compared) = (Vec::new(), 0, 0);
    for seed in 0..SEEDS {
        let recipe = BagRecipe::two_pattern_grade(BAGS, K, seed);
        let bags = generate(&recipe).unwrap();
        let (_, report) = pseudo_label_round(&round_config(HeadVariant::Transformer, &recipe), &bags, &opts(false)).unwrap();
        deltas.push(report.delta_qwk);
        for f in &report.folds {
            changed += f.second_round.changed;
            compared += f.second_round.compared;
        }
    }
    let mut gains = Vec::new();
    for seed in 0..SEEDS {
        let recipe = BagRecipe { noise_std: 3.0, ..BagRecipe::max_rule(BAGS, K, 4, seed) };
        let bags = generate(&recipe).unwrap();
        let (_, report) = pseudo_label_round(&round_config(HeadVariant::Attention, &recipe), &bags, &opts(true)).unwrap();
        for f in &report.folds {
            gains.push(f.agreement_after.unwrap() - f.agreement_before.unwrap());
        }
    }
    let (delta, gain) = (mean(&deltas), mean(&gains));
    let rate = changed as f64 / compared as f64;
    let shown: Vec<String> = deltas.iter().map(|d| format!("{d:+.4}")).collect();
    (
        delta >= -0.005 && gain >= 0.05 && rate < 0.01,
        format!(
            "grade mean dQWK {delta:+.4} {shown:?}; max-rule agreement gain {:+.1} points; second-round change {:.2}% ({changed}/{compared})",
            100.0 * gain,
            100.0 * rate
        ),
    )
}

fn determinism_and_persistence() -> Verdict {
    let recipe = BagRecipe::two_pattern_grade(120, 8, 3);
    let bags = generate(&recipe).unwrap();
    let mut cfg = desk_config(HeadVariant::Transformer, &recipe);
    cfg.epochs = 3;
    cfg.folds = 3;
    let bits = |run: &milkit::harness::CvRun| {
        let mut v: Vec<u64> = run.report.folds.iter().flat_map(|f| [f.accuracy.to_bits(), f.qwk.to_bits(), f.auc.unwrap_or(-1.0).to_bits()]).collect();
        v.extend(run.models.iter().flat_map(|m| m.model.params().values().concat()).map(|x| u64::from(x.to_bits())));
        v
    };
    par::set_sequential(true);
    let first = cross_validate(&cfg, &bags, "a").unwrap();
    let second = cross_validate(&cfg, &bags, "a").unwrap();
    par::set_sequential(false);
    let threaded = cross_validate(&cfg, &bags, "a").unwrap();
    let same_run = bits(&first) == bits(&second);
    let same_threads = bits(&first) == bits(&threaded);

    let dir = tempfile::tempdir().unwrap();
    let model = first.models[0].model.clone();
    let ckpt = dir.path().join("m.ckpt");
    Checkpoint::new(model.clone(), first.models[0].steps).save(&ckpt).unwrap();
    let loaded = Checkpoint::load(&ckpt).unwrap().model;
    let checkpoint_exact = bags.iter().all(|b| {
        let (x, y) = (model.infer(&b.instances).unwrap(), loaded.infer(&b.instances).unwrap());
        let f = |v: &[f32]| v.iter().map(|z| z.to_bits()).collect::<Vec<_>>();
        f(&x.bag_logits) == f(&y.bag_logits) && f(&x.attention) == f(&y.attention) && f(&x.instance_probs) == f(&y.instance_probs)
    });

    let manifest_path = dir.path().join("manifest.json");
    bagsynth::save_manifest(&manifest_path, &Manifest::new(recipe.clone())).unwrap();
    let regenerated = bagsynth::load_manifest(&manifest_path).unwrap().generate().unwrap();
    let manifest_exact = regenerated.len() == bags.len()
        && regenerated.iter().zip(&bags).all(|(a, b)| {
            a.label == b.label && a.patterns == b.patterns && a.instances.data().iter().map(|x| x.to_bits()).eq(b.instances.data().iter().map(|x| x.to_bits()))
        });
    (
        same_run && same_threads && checkpoint_exact && manifest_exact,
        format!("repeat run identical {same_run}, threaded run identical {same_threads}, checkpoint bit-exact {checkpoint_exact}, manifest regeneration bit-exact {manifest_exact}"),
    )
}
