//! Ensemble pseudo-labelling of instances and the combined bag + instance loss.
//!
//! An ensemble's averaged attention ranks the instances of each positive bag:
//! the top `m = max(1, ⌊0.1·K⌋)` take the ensemble's instance class, the
//! bottom `m` take class 0, and the rest stay unknown. Every instance of a
//! negative bag takes class 0.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::{Graph, Reduction, Var};
use crate::bagsynth::Bag;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::train::{ensemble_predict, job_seed, make_folds, train_job, InstanceTargets, Job, TrainedModel};
use crate::heads::argmax;
use crate::metrics::{accuracy, aggregate_folds, FoldMetrics, MetricsReport};
use crate::model::Model;
use crate::par;

/// Share of a positive bag's instances labelled at each end of the attention ranking.
pub const TOP_FRACTION: f64 = 0.10;

/// Instances labelled at each end of the ranking for a bag of `k`.
pub fn labelled_per_end(k: usize) -> usize {
    ((TOP_FRACTION * k as f64).floor() as usize).max(1)
}

/// Ensemble outputs for one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagEnsemble {
    pub bag_id: usize,
    /// Mean attention per instance; sums to one.
    pub attention: Vec<f64>,
    /// Row-major `[K×C]` mean instance probabilities.
    pub instance_probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleInference {
    pub members: usize,
    pub classes: usize,
    pub bags: Vec<BagEnsemble>,
}

/// Average attention (each member's renormalized first) and instance
/// probabilities over an ensemble, on each bag's stored instances.
pub fn ensemble_infer(models: &[&Model<f32>], bags: &[Bag]) -> Result<EnsembleInference> {
    let first = models.first().ok_or_else(|| Error::Config("empty ensemble".into()))?;
    if models.iter().any(|m| m.spec() != first.spec()) {
        return Err(Error::Config("ensemble members have different model specs".into()));
    }
    let classes = first.num_classes();
    let n = models.len() as f64;
    let out = par::try_map(bags.len(), |b| {
        let bag = &bags[b];
        let k = bag.instances.shape()[0];
        let mut attention = vec![0.0; k];
        let mut probs = vec![0.0; k * classes];
        for m in models {
            let inf = m.infer(&bag.instances)?;
            let total: f64 = inf.attention.iter().map(|&a| f64::from(a)).sum();
            for (acc, &a) in attention.iter_mut().zip(&inf.attention) {
                *acc += f64::from(a) / total;
            }
            for (acc, &p) in probs.iter_mut().zip(&inf.instance_probs) {
                *acc += f64::from(p) / n;
            }
        }
        let total: f64 = attention.iter().sum();
        attention.iter_mut().for_each(|a| *a /= total);
        Ok(BagEnsemble {
            bag_id: bag.id,
            attention,
            instance_probs: probs,
        })
    })?;
    Ok(EnsembleInference {
        members: models.len(),
        classes,
        bags: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    EnsembleTop,
    ForcedZeroLowAttention,
    ForcedZeroNegativeBag,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub bag_id: usize,
    pub instance_idx: usize,
    /// Class id, or `None` for an unknown instance (`"unknown"` in JSON).
    #[serde(serialize_with = "ser_label", deserialize_with = "de_label")]
    pub label: Option<usize>,
    pub source: LabelSource,
    pub attention: f64,
}

fn ser_label<S: Serializer>(label: &Option<usize>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match label {
        Some(c) => s.serialize_u64(*c as u64),
        None => s.serialize_str("unknown"),
    }
}

fn de_label<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Class(usize),
        Word(String),
    }
    match Raw::deserialize(d)? {
        Raw::Class(c) => Ok(Some(c)),
        Raw::Word(w) if w == "unknown" => Ok(None),
        Raw::Word(w) => Err(serde::de::Error::custom(format!("expected a class id or \"unknown\", got {w:?}"))),
    }
}

/// Pseudo-labels for every instance of every bag, bag by bag in instance order.
pub fn assign_pseudo_labels(inference: &EnsembleInference, bag_labels: &[usize]) -> Result<Vec<PseudoLabelRecord>> {
    if bag_labels.len() != inference.bags.len() {
        return Err(Error::shape("assign_pseudo_labels", &[inference.bags.len()], &[bag_labels.len()]));
    }
    let c = inference.classes;
    let mut records = Vec::new();
    for (bag, &label) in inference.bags.iter().zip(bag_labels) {
        let k = bag.attention.len();
        if k == 0 {
            return Err(Error::Data(format!("bag {} has no instances", bag.bag_id)));
        }
        let mut labels = vec![(None, LabelSource::Unknown); k];
        if label == 0 {
            labels.fill((Some(0), LabelSource::ForcedZeroNegativeBag));
        } else {
            let m = labelled_per_end(k);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| bag.attention[b].total_cmp(&bag.attention[a]));
            let top = &order[..m];
            let bottom = &order[k - m..];
            for &i in top {
                let class = argmax(&bag.instance_probs[i * c..(i + 1) * c]);
                labels[i] = (Some(class), LabelSource::EnsembleTop);
            }
            for &i in bottom {
                labels[i] = if top.contains(&i) {
                    (None, LabelSource::Unknown)
                } else {
                    (Some(0), LabelSource::ForcedZeroLowAttention)
                };
            }
        }
        records.extend(labels.into_iter().enumerate().map(|(i, (label, source))| PseudoLabelRecord {
            bag_id: bag.bag_id,
            instance_idx: i,
            label,
            source,
            attention: bag.attention[i],
        }));
    }
    Ok(records)
}

/// CE(bag) + λ·Σ_k CE(instance_k) over instances with a known target.
pub fn combined_loss<T: crate::tensor::Real>(
    g: &mut Graph<T>,
    bag_logits: Var,
    bag_label: usize,
    instance_logits: Var,
    targets: &[Option<usize>],
    lambda: f64,
    reduction: Reduction,
) -> Result<Var> {
    let bag = g.cross_entropy(bag_logits, &[bag_label], Reduction::Mean, None)?;
    let shape = g.shape(instance_logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("combined_loss", &shape, &[targets.len()]));
    }
    if lambda == 0.0 || targets.iter().all(Option::is_none) {
        return Ok(bag);
    }
    let ignore = shape[1];
    let dense: Vec<usize> = targets.iter().map(|t| t.unwrap_or(ignore)).collect();
    let patch = g.cross_entropy(instance_logits, &dense, reduction, Some(ignore))?;
    let weighted = g.scale(patch, T::of(lambda));
    g.add(bag, weighted)
}

/// Instance targets per dataset position, from records keyed by bag id.
pub fn records_to_targets(records: &[PseudoLabelRecord], bags: &[Bag]) -> Result<Vec<InstanceTargets>> {
    let pos: std::collections::HashMap<usize, usize> = bags.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let mut targets: Vec<InstanceTargets> = bags.iter().map(|b| vec![None; b.instances.shape()[0]]).collect();
    for r in records {
        let &p = pos.get(&r.bag_id).ok_or_else(|| Error::Data(format!("record for unknown bag {}", r.bag_id)))?;
        let slot = targets[p]
            .get_mut(r.instance_idx)
            .ok_or_else(|| Error::Data(format!("bag {} has no instance {}", r.bag_id, r.instance_idx)))?;
        *slot = r.label;
    }
    Ok(targets)
}

pub fn write_records(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Counts of one round's labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub ensemble_top: usize,
    pub forced_zero_low_attention: usize,
    pub forced_zero_negative_bag: usize,
    pub unknown: usize,
    /// Labelled instances per class.
    pub per_class: Vec<usize>,
}

impl LabelTable {
    pub fn from_records(records: &[PseudoLabelRecord], classes: usize) -> Self {
        let mut t = LabelTable {
            per_class: vec![0; classes],
            ..Default::default()
        };
        for r in records {
            match r.source {
                LabelSource::EnsembleTop => t.ensemble_top += 1,
                LabelSource::ForcedZeroLowAttention => t.forced_zero_low_attention += 1,
                LabelSource::ForcedZeroNegativeBag => t.forced_zero_negative_bag += 1,
                LabelSource::Unknown => t.unknown += 1,
            }
            if let Some(c) = r.label {
                t.per_class[c] += 1;
            }
        }
        t
    }
}

/// How a later round's labels differ from an earlier one's.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelChange {
    /// Instances with a class label in both rounds.
    pub compared: usize,
    /// Of those, instances whose class differs.
    pub changed: usize,
    /// `changed / compared`.
    pub rate: f64,
    /// Instances that moved between labelled and unknown.
    pub status_changed: usize,
}

pub fn label_change(before: &[PseudoLabelRecord], after: &[PseudoLabelRecord]) -> Result<LabelChange> {
    if before.len() != after.len() {
        return Err(Error::shape("label_change", &[before.len()], &[after.len()]));
    }
    let mut c = LabelChange::default();
    for (a, b) in before.iter().zip(after) {
        if (a.bag_id, a.instance_idx) != (b.bag_id, b.instance_idx) {
            return Err(Error::Data("label rounds cover different instances".into()));
        }
        match (a.label, b.label) {
            (Some(x), Some(y)) => {
                c.compared += 1;
                c.changed += usize::from(x != y);
            }
            (None, None) => {}
            _ => c.status_changed += 1,
        }
    }
    c.rate = if c.compared == 0 { 0.0 } else { c.changed as f64 / c.compared as f64 };
    Ok(c)
}

/// Share of instances whose hidden pattern id equals the argmax of the
/// ensemble's instance probabilities. Only meaningful when pattern ids are
/// class ids (max rule).
pub fn instance_agreement(inference: &EnsembleInference, bags: &[Bag]) -> Result<f64> {
    let c = inference.classes;
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (e, bag) in inference.bags.iter().zip(bags) {
        truth.extend_from_slice(&bag.patterns);
        pred.extend(e.instance_probs.chunks_exact(c).map(argmax));
    }
    accuracy(&truth, &pred)
}

/// Share of labelled pseudo-labels that equal the hidden pattern id.
pub fn pseudo_label_precision(records: &[PseudoLabelRecord], bags: &[Bag]) -> Option<f64> {
    let pos: std::collections::HashMap<usize, &Bag> = bags.iter().map(|b| (b.id, b)).collect();
    let (mut n, mut hit) = (0usize, 0usize);
    for r in records {
        if let (Some(l), Some(b)) = (r.label, pos.get(&r.bag_id)) {
            n += 1;
            hit += usize::from(b.patterns[r.instance_idx] == l);
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRound {
    pub fold: usize,
    /// Mean over ensemble members of their validation metrics.
    pub before: FoldMetrics,
    pub after: FoldMetrics,
    pub ensemble_before: FoldMetrics,
    pub ensemble_after: FoldMetrics,
    pub labels: LabelTable,
    /// Validation-bag instance agreement with hidden patterns, before and after.
    pub agreement_before: Option<f64>,
    pub agreement_after: Option<f64>,
    pub pseudo_label_precision: Option<f64>,
    /// Labels a second round would assign, compared with the first.
    pub second_round: LabelChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub folds: Vec<FoldRound>,
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub delta_qwk: f64,
}

fn mean_metrics(ms: &[FoldMetrics]) -> FoldMetrics {
    let n = ms.len() as f64;
    let aucs: Vec<f64> = ms.iter().filter_map(|m| m.auc).collect();
    FoldMetrics {
        accuracy: ms.iter().map(|m| m.accuracy).sum::<f64>() / n,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        qwk: ms.iter().map(|m| m.qwk).sum::<f64>() / n,
    }
}

fn ensemble_metrics(models: &[&Model<f32>], bags: &[Bag], idx: &[usize]) -> Result<FoldMetrics> {
    let subset: Vec<Bag> = idx.iter().map(|&i| bags[i].clone()).collect();
    let (probs, preds) = ensemble_predict(models, &subset)?;
    let targets: Vec<usize> = subset.iter().map(|b| b.label).collect();
    FoldMetrics::compute(&targets, &preds, &probs, models[0].num_classes())
}

/// Which folds a round covers.
#[derive(Clone, Debug, Default)]
pub struct RoundOptions {
    /// Restrict to these fold indices; all folds when `None`.
    pub folds: Option<Vec<usize>>,
    /// Report instance agreement with hidden patterns (max-rule data).
    pub agreement: bool,
}

/// Full round per fold: train the ensemble on bag labels, pseudo-label the
/// training bags, retrain every member with the combined loss, and compare.
pub fn pseudo_label_round(cfg: &TrainConfig, bags: &[Bag], opts: &RoundOptions) -> Result<(Vec<Vec<TrainedModel>>, RoundReport)> {
    cfg.validate()?;
    cfg.check_compatible(bags)?;
    let folds = make_folds(cfg, bags)?;
    let chosen: Vec<usize> = opts.folds.clone().unwrap_or_else(|| (0..folds.len()).collect());
    if let Some(&f) = chosen.iter().find(|&&f| f >= folds.len()) {
        return Err(Error::Config(format!("fold {f} out of range for {} folds", folds.len())));
    }
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let mut retrained_all = Vec::new();
    let mut rounds = Vec::new();
    for &f in &chosen {
        let fold = &folds[f];
        let members = par::try_map(cfg.ensemble, |n| {
            train_job(&Job {
                cfg,
                bags,
                train: &fold.train,
                val: &fold.val,
                seed: job_seed(cfg, f, n),
                targets: None,
                init: None,
            })
        })?;
        let member_refs: Vec<&Model<f32>> = members.iter().map(|m| &m.model).collect();
        let train_bags: Vec<Bag> = fold.train.iter().map(|&i| bags[i].clone()).collect();
        let train_labels: Vec<usize> = fold.train.iter().map(|&i| labels[i]).collect();
        let inference = ensemble_infer(&member_refs, &train_bags)?;
        let records = assign_pseudo_labels(&inference, &train_labels)?;
        let targets = records_to_targets(&records, bags)?;
        let retrained = par::try_map(cfg.ensemble, |n| {
            train_job(&Job {
                cfg,
                bags,
                train: &fold.train,
                val: &fold.val,
                seed: job_seed(cfg, f, n),
                targets: Some(&targets),
                init: cfg.warm_start.then_some(&members[n].model),
            })
        })?;
        let retrained_refs: Vec<&Model<f32>> = retrained.iter().map(|m| &m.model).collect();
        let second = assign_pseudo_labels(&ensemble_infer(&retrained_refs, &train_bags)?, &train_labels)?;
        let val_bags: Vec<Bag> = fold.val.iter().map(|&i| bags[i].clone()).collect();
        let (agreement_before, agreement_after) = if opts.agreement {
            (
                Some(instance_agreement(&ensemble_infer(&member_refs, &val_bags)?, &val_bags)?),
                Some(instance_agreement(&ensemble_infer(&retrained_refs, &val_bags)?, &val_bags)?),
            )
        } else {
            (None, None)
        };
        let member_metrics = |ms: &[TrainedModel]| mean_metrics(&ms.iter().map(|m| m.metrics.unwrap_or_default()).collect::<Vec<_>>());
        rounds.push(FoldRound {
            fold: f,
            before: member_metrics(&members),
            after: member_metrics(&retrained),
            ensemble_before: ensemble_metrics(&member_refs, bags, &fold.val)?,
            ensemble_after: ensemble_metrics(&retrained_refs, bags, &fold.val)?,
            labels: LabelTable::from_records(&records, cfg.model.num_classes()),
            agreement_before,
            agreement_after,
            pseudo_label_precision: opts.agreement.then(|| pseudo_label_precision(&records, &train_bags)).flatten(),
            second_round: label_change(&records, &second)?,
        });
        retrained_all.push(retrained);
    }
    let method = cfg.model.head.variant.label();
    let before = aggregate_folds(method, &rounds.iter().map(|r| r.before).collect::<Vec<_>>())?;
    let after = aggregate_folds(&format!("{method} + pseudo-labels"), &rounds.iter().map(|r| r.after).collect::<Vec<_>>())?;
    let delta_qwk = after.mean.qwk - before.mean.qwk;
    Ok((retrained_all, RoundReport { folds: rounds, before, after, delta_qwk }))
}
