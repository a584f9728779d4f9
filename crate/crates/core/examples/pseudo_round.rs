//! One pseudo-labelling round on a synthetic task, per seed.
//!
//! `cargo run --release --example pseudo_round -- [grade|max] [bags] [epochs] [seeds] [ensemble]`

use std::time::Instant;

use milkit::autograd::Reduction;
use milkit::bagsynth::{generate, BagRecipe};
use milkit::harness::{DataSource, TrainConfig};
use milkit::heads::{HeadVariant, MilHeadSpec};
use milkit::model::ModelSpec;
use milkit::nn::BackboneSpec;
use milkit::pseudolabel::{pseudo_label_round, RoundOptions};

fn main() -> milkit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let task = args.get(1).map_or("grade", String::as_str);
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let ensemble: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(5);
    let lambda: f64 = std::env::var("LAMBDA").ok().and_then(|v| v.parse().ok()).unwrap_or(100.0);
    let mean_reduction = std::env::var("MEAN").is_ok();
    let (variant, agreement) = match task {
        "max" => (HeadVariant::Attention, true),
        _ => (HeadVariant::Transformer, false),
    };
    for seed in 0..seeds {
        let start = Instant::now();
        let recipe = match task {
            "max" => BagRecipe::max_rule(count, 16, 4, seed),
            _ => BagRecipe::two_pattern_grade(count, 16, seed),
        };
        let mut recipe = recipe;
        if let Ok(v) = std::env::var("NOISE") {
            recipe.noise_std = v.parse().unwrap();
        }
        if let Ok(v) = std::env::var("NEG") {
            recipe.mixture[0] = v.parse().unwrap();
        }
        let bags = generate(&recipe)?;
        let mut head = MilHeadSpec::new(variant, recipe.num_classes());
        head.attention_dim = 16;
        head.depth = 1;
        head.num_heads = 2;
        let model = ModelSpec {
            backbone: BackboneSpec::Mlp { input_dim: recipe.feature_dim, stage_dims: vec![16] },
            head,
        };
        let mut cfg = TrainConfig::new(model, DataSource::Recipe(recipe));
        cfg.epochs = epochs;
        cfg.lr = 1e-3;
        cfg.transformer_lr = 1e-3;
        cfg.seed = seed;
        cfg.ensemble = ensemble;
        cfg.lambda = lambda;
        if mean_reduction {
            cfg.patch_reduction = Reduction::Mean;
        }
        cfg.warm_start = std::env::var("WARM").is_ok();
        let opts = RoundOptions { folds: Some(vec![0]), agreement };
        let (_, report) = pseudo_label_round(&cfg, &bags, &opts)?;
        for f in &report.folds {
            println!(
                "seed {seed} fold {}: qwk {:.4} -> {:.4} (ens {:.4} -> {:.4}) agreement {:?} -> {:?} precision {:?} change {:.4} ({}/{}, status {}) [{:.1}s]",
                f.fold,
                f.before.qwk,
                f.after.qwk,
                f.ensemble_before.qwk,
                f.ensemble_after.qwk,
                f.agreement_before,
                f.agreement_after,
                f.pseudo_label_precision,
                f.second_round.rate,
                f.second_round.changed,
                f.second_round.compared,
                f.second_round.status_changed,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
