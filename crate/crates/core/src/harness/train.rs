//! Cross-validated training, evaluation and ensembling.
//!
//! A job trains one model on a fold's training bags. Each step sums the
//! per-bag gradients of a batch in bag order and divides by the batch size,
//! so results do not depend on how bags are spread over threads. After every
//! epoch the model is scored on the validation bags and the best-QWK weights
//! are kept.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, TrainConfig};
use super::optim::{cosine_lr, Adam, StepRates};
use crate::autograd::Graph;
use crate::bagsynth::{kfold_split, Bag, Fold};
use crate::error::{Error, Result};
use crate::heads::argmax;
use crate::metrics::{aggregate_folds, FoldMetrics, MetricsReport};
use crate::model::Model;
use crate::par;
use crate::pseudolabel::combined_loss;
use crate::tensor::Tensor;

/// Instance targets of one bag; `None` marks an unknown instance.
pub type InstanceTargets = Vec<Option<usize>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<FoldMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model<f32>,
    pub steps: u64,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub metrics: Option<FoldMetrics>,
    pub history: Vec<EpochLog>,
}

/// One training run on a subset of a dataset.
pub struct Job<'a> {
    pub cfg: &'a TrainConfig,
    pub bags: &'a [Bag],
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub seed: u64,
    /// Per dataset position: instance targets for the patch loss.
    pub targets: Option<&'a [InstanceTargets]>,
    /// Start from these weights instead of a fresh initialization.
    pub init: Option<&'a Model<f32>>,
}

/// Loss and parameter gradients of one bag.
pub fn bag_gradient(
    model: &Model<f32>,
    instances: &Tensor<f32>,
    label: usize,
    targets: Option<&[Option<usize>]>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let out = model.forward(&mut g, &p, instances)?;
    let unlabelled = vec![None; instances.shape()[0]];
    let (targets, lambda) = match targets {
        Some(t) => (t, cfg.lambda),
        None => (unlabelled.as_slice(), 0.0),
    };
    let loss = combined_loss(&mut g, out.bag_logits, label, out.instance_logits, targets, lambda, cfg.patch_reduction)?;
    let value = f64::from(g.value(loss)[0]);
    g.backward(loss)?;
    Ok((value, model.params().collect_grads(&g, &p)))
}

/// Probabilities `[n×C]` (row-major) and predicted classes for bags.
pub fn predict(model: &Model<f32>, bags: &[Bag], idx: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    let rows = par::try_map(idx.len(), |j| {
        let (x, _) = bags[idx[j]].eval_instances()?;
        let out = model.infer(&x)?;
        Ok(out.bag_probs.iter().map(|&p| f64::from(p)).collect::<Vec<f64>>())
    })?;
    let preds = rows.iter().map(|r| argmax(r)).collect();
    Ok((rows.concat(), preds))
}

pub fn evaluate(model: &Model<f32>, bags: &[Bag], idx: &[usize]) -> Result<FoldMetrics> {
    let (probs, preds) = predict(model, bags, idx)?;
    let targets: Vec<usize> = idx.iter().map(|&i| bags[i].label).collect();
    FoldMetrics::compute(&targets, &preds, &probs, model.num_classes())
}

pub fn train_job(job: &Job) -> Result<TrainedModel> {
    let cfg = job.cfg;
    if job.train.is_empty() {
        return Err(Error::Data("no training bags".into()));
    }
    let mut model = match job.init {
        Some(m) => m.clone(),
        None => Model::<f32>::new(&cfg.model, job.seed)?,
    };
    let mut adam = Adam::new(model.params());
    let steps_per_epoch = job.train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let peak = StepRates {
        base_lr: cfg.lr,
        transformer_lr: cfg.transformer_lr,
        weight_decay: cfg.weight_decay,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(job.seed);
    shuffle_rng.set_stream(1);
    let mut order = job.train.to_vec();
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<f32>, FoldMetrics)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let model_ref = &model;
            let results = par::try_map(batch.len(), |j| {
                let bag = &job.bags[batch[j]];
                let targets = job.targets.map(|t| t[batch[j]].as_slice());
                let instances = if targets.is_some() {
                    bag.instances.clone()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
                    rng.set_stream(((epoch as u64) << 32) | bag.id as u64);
                    bag.epoch_instances(&mut rng, bag.len())?.0
                };
                let (loss, grads) = bag_gradient(model_ref, &instances, bag.label, targets, cfg)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss {loss} on bag {} in epoch {epoch}", bag.id)));
                }
                Ok((loss, grads))
            })?;
            let scale = 1.0 / batch.len() as f32;
            let mut sum: Vec<Vec<f32>> = results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
            for (loss, grads) in &results {
                epoch_loss += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    for (a, &x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
            }
            sum.iter_mut().flatten().for_each(|a| *a *= scale);
            let factor = cosine_lr(step, total, 1.0)?;
            adam.step(model.params_mut(), &sum, peak.scaled(factor))?;
            step += 1;
        }
        let val = if job.val.is_empty() { None } else { Some(evaluate(&model, job.bags, job.val)?) };
        history.push(EpochLog {
            epoch,
            train_loss: epoch_loss / job.train.len() as f64,
            val,
        });
        let score = val.map_or(f64::NEG_INFINITY, |m| m.qwk);
        if best.as_ref().is_none_or(|b| score > b.0) || val.is_none() {
            best = Some((score, epoch, model.clone(), val.unwrap_or_default()));
        }
    }
    let (_, best_epoch, best_model, metrics) = best.expect("at least one epoch");
    Ok(TrainedModel {
        model: best_model,
        steps: adam.steps(),
        best_epoch,
        metrics: (!job.val.is_empty()).then_some(metrics),
        history,
    })
}

/// Result of k-fold cross-validation with one model per fold.
pub struct CvRun {
    pub folds: Vec<Fold>,
    pub models: Vec<TrainedModel>,
    pub report: MetricsReport,
}

pub fn make_folds(cfg: &TrainConfig, bags: &[Bag]) -> Result<Vec<Fold>> {
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    kfold_split(&labels, cfg.folds, cfg.seed)
}

/// Seed of ensemble member `member` in fold `fold`.
pub fn job_seed(cfg: &TrainConfig, fold: usize, member: usize) -> u64 {
    derive_seed(cfg.seed, &[fold as u64, member as u64])
}

pub fn cross_validate(cfg: &TrainConfig, bags: &[Bag], method: &str) -> Result<CvRun> {
    cross_validate_with(cfg, bags, method, None)
}

/// Cross-validate, adding the patch loss wherever `targets` has labels.
pub fn cross_validate_with(cfg: &TrainConfig, bags: &[Bag], method: &str, targets: Option<&[InstanceTargets]>) -> Result<CvRun> {
    cfg.validate()?;
    if let Some(t) = targets {
        if t.len() != bags.len() {
            return Err(Error::Data(format!("{} target rows for {} bags", t.len(), bags.len())));
        }
    }
    cfg.check_compatible(bags)?;
    let folds = make_folds(cfg, bags)?;
    let models = par::try_map(folds.len(), |f| {
        train_job(&Job {
            cfg,
            bags,
            train: &folds[f].train,
            val: &folds[f].val,
            seed: job_seed(cfg, f, 0),
            targets,
            init: None,
        })
    })?;
    let per_fold: Vec<FoldMetrics> = models.iter().map(|m| m.metrics.unwrap_or_default()).collect();
    let report = aggregate_folds(method, &per_fold)?;
    Ok(CvRun { folds, models, report })
}

/// Load the configured data and cross-validate.
pub fn train(cfg: &TrainConfig) -> Result<CvRun> {
    let bags = cfg.data.load()?;
    cross_validate(cfg, &bags, cfg.model.head.variant.label())
}

/// Mean bag probabilities of several models and the argmax class per bag.
pub fn ensemble_predict(models: &[&Model<f32>], bags: &[Bag]) -> Result<(Vec<f64>, Vec<usize>)> {
    let first = models.first().ok_or_else(|| Error::Config("empty ensemble".into()))?;
    if let Some(m) = models.iter().find(|m| m.spec() != first.spec()) {
        return Err(Error::Config(format!(
            "ensemble members disagree: {:?} vs {:?}",
            first.spec().head.variant,
            m.spec().head.variant
        )));
    }
    let c = first.num_classes();
    let idx: Vec<usize> = (0..bags.len()).collect();
    let mut mean = vec![0.0; bags.len() * c];
    for m in models {
        let (probs, _) = predict(m, bags, &idx)?;
        for (a, p) in mean.iter_mut().zip(probs) {
            *a += p;
        }
    }
    let n = models.len() as f64;
    mean.iter_mut().for_each(|a| *a /= n);
    let preds = mean.chunks_exact(c).map(argmax).collect();
    Ok((mean, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagsynth::{generate, BagRecipe};
    use crate::harness::config::DataSource;
    use crate::heads::{HeadVariant, MilHeadSpec};
    use crate::model::ModelSpec;
    use crate::nn::BackboneSpec;

    fn cfg(variant: HeadVariant, recipe: BagRecipe) -> TrainConfig {
        let mut head = MilHeadSpec::new(variant, recipe.num_classes());
        head.attention_dim = 8;
        head.depth = 1;
        head.num_heads = 2;
        let model = ModelSpec {
            backbone: BackboneSpec::Mlp { input_dim: recipe.feature_dim, stage_dims: vec![8] },
            head,
        };
        let mut c = TrainConfig::new(model, DataSource::Recipe(recipe));
        c.epochs = 2;
        c.folds = 2;
        c.lr = 3e-3;
        c
    }

    #[test]
    fn smoke_two_bags_one_epoch() {
        let recipe = BagRecipe::max_rule(2, 4, 3, 1);
        let mut c = cfg(HeadVariant::Attention, recipe);
        c.epochs = 1;
        let bags = c.data.load().unwrap();
        let out = train_job(&Job { cfg: &c, bags: &bags, train: &[0, 1], val: &[], seed: 0, targets: None, init: None }).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn same_seed_same_result() {
        let c = cfg(HeadVariant::Transformer, BagRecipe::two_pattern_grade(40, 6, 2));
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.models[0].model.params().values(), b.models[0].model.params().values());
    }

    #[test]
    fn folds_do_not_leak() {
        let c = cfg(HeadVariant::Max, BagRecipe::max_rule(30, 4, 3, 0));
        let run = train(&c).unwrap();
        for f in &run.folds {
            assert!(f.val.iter().all(|v| !f.train.contains(v)));
        }
    }

    #[test]
    fn ensemble_of_identical_models_matches_single() {
        let c = cfg(HeadVariant::Attention, BagRecipe::max_rule(6, 4, 3, 0));
        let bags = generate(&BagRecipe::max_rule(6, 4, 3, 0)).unwrap();
        let m = Model::<f32>::new(&c.model, 5).unwrap();
        let (single, ps) = ensemble_predict(&[&m], &bags).unwrap();
        let (double, pd) = ensemble_predict(&[&m, &m], &bags).unwrap();
        assert_eq!(ps, pd);
        for (a, b) in single.iter().zip(&double) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in single.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let other = Model::<f32>::new(&cfg(HeadVariant::Max, BagRecipe::max_rule(6, 4, 3, 0)).model, 5).unwrap();
        assert!(ensemble_predict(&[&m, &other], &bags).is_err());
    }

    #[test]
    fn one_epoch_lowers_the_loss() {
        let mut c = cfg(HeadVariant::Attention, BagRecipe::max_rule(100, 8, 2, 4));
        c.epochs = 1;
        let bags = c.data.load().unwrap();
        let idx: Vec<usize> = (0..bags.len()).collect();
        let nll = |m: &Model<f32>| {
            let (probs, _) = predict(m, &bags, &idx).unwrap();
            let k = m.num_classes();
            bags.iter().enumerate().map(|(i, b)| -probs[i * k + b.label].ln()).sum::<f64>() / bags.len() as f64
        };
        let before = nll(&Model::new(&c.model, 9).unwrap());
        let out = train_job(&Job { cfg: &c, bags: &bags, train: &idx, val: &[], seed: 9, targets: None, init: None }).unwrap();
        assert!(nll(&out.model) < before);
    }

    #[test]
    fn targets_must_cover_every_bag() {
        let c = cfg(HeadVariant::Attention, BagRecipe::max_rule(10, 4, 3, 0));
        let bags = c.data.load().unwrap();
        assert!(cross_validate_with(&c, &bags, "x", Some(&[vec![None; 4]])).is_err());
    }
}
