//! Cross-validated comparison of MIL heads on a synthetic task.
//!
//! `cargo run --release --example ablation -- [grade|max] [bags] [epochs] [seeds]`

use std::time::Instant;

use milkit::bagsynth::{generate, BagRecipe};
use milkit::harness::{cross_validate, DataSource, TrainConfig};
use milkit::heads::{HeadVariant, MilHeadSpec};
use milkit::model::ModelSpec;
use milkit::nn::BackboneSpec;

fn main() -> milkit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let task = args.get(1).map_or("grade", String::as_str);
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let variants: Vec<HeadVariant> = match args.get(5).map(String::as_str) {
        Some("t") => vec![HeadVariant::Transformer],
        Some("a") => vec![HeadVariant::Attention],
        _ => vec![HeadVariant::Max, HeadVariant::Attention, HeadVariant::Transformer],
    };
    for variant in variants {
        let start = Instant::now();
        let mut qwk = Vec::new();
        for seed in 0..seeds {
            let recipe = match task {
                "max" => BagRecipe::max_rule(count, 16, 4, seed),
                _ => BagRecipe::two_pattern_grade(count, 16, seed),
            };
            let mut recipe = recipe;
            if let Ok(v) = std::env::var("NOISE") {
                recipe.noise_std = v.parse().unwrap();
            }
            if let Ok(v) = std::env::var("MAL") {
                let v: Vec<f64> = v.split(',').map(|x| x.parse().unwrap()).collect();
                recipe.malignant_fraction = (v[0], v[1]);
            }
            if let Ok(v) = std::env::var("SHARE") {
                recipe.second_share = (0.0, v.parse().unwrap());
            }
            if let Ok(v) = std::env::var("SECOND") {
                recipe.second_pattern_rate = v.parse().unwrap();
            }
            let bags = generate(&recipe)?;
            let width: usize = std::env::var("WIDTH").ok().and_then(|v| v.parse().ok()).unwrap_or(16);
            let mut head = MilHeadSpec::new(variant, recipe.num_classes());
            head.attention_dim = width;
            head.depth = 1;
            head.num_heads = 2;
            let model = ModelSpec {
                backbone: BackboneSpec::Mlp { input_dim: recipe.feature_dim, stage_dims: vec![width] },
                head,
            };
            let mut cfg = TrainConfig::new(model, DataSource::Recipe(recipe));
            cfg.epochs = epochs;
            cfg.lr = 1e-3;
            cfg.transformer_lr = 1e-3;
            cfg.seed = seed;
            let run = cross_validate(&cfg, &bags, variant.label())?;
            let fq: Vec<String> = run.report.folds.iter().map(|f| format!("{:.3}", f.qwk)).collect();
            println!("  seed {seed}: qwk {:.4} folds [{}]", run.report.mean.qwk, fq.join(" "));
            qwk.push(run.report.mean.qwk);
        }
        println!(
            "{}: mean qwk {:.4} ({:.1}s)",
            variant.label(),
            qwk.iter().sum::<f64>() / qwk.len() as f64,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
