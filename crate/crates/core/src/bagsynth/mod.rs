//! Deterministic synthetic MIL datasets.
//!
//! Each bag mixes a benign pattern (id 0) with up to two malignant patterns.
//! In feature mode an instance is a Gaussian sample around its pattern mean;
//! in image mode a textured slide is rendered and tiled (see [`image`]).
//! The bag label is derived from the hidden per-instance patterns by either
//! the max rule or the two-pattern grade rule.
//!
//! Bag `i` draws from its own ChaCha8 stream (`seed`, stream `i`), so a
//! dataset is reproducible regardless of how generation is scheduled.

pub mod image;
pub mod split;
pub mod store;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub use image::{ImageSpec, Slide, Texture};
pub use split::{kfold_split, Fold};
pub use store::{load_manifest, read_jsonl, save_manifest, write_jsonl, Manifest};

/// Malignant pattern ids understood by the grade rule.
pub const GRADE_PATTERNS: [usize; 3] = [3, 4, 5];
/// Number of classes produced by the grade rule.
pub const GRADE_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Label is the highest pattern id present.
    MaxRule,
    /// Label is a grade looked up from the two most frequent malignant patterns.
    TwoPatternGrade,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    #[default]
    Feature,
    Image,
}

/// Generator parameters of one pattern class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub id: usize,
    pub mean: Vec<f32>,
    pub std: f32,
    pub texture: Texture,
    pub intensity: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagRecipe {
    pub label_rule: LabelRule,
    /// Pattern ids; the first is the benign pattern 0.
    pub pattern_ids: Vec<usize>,
    /// Relative frequency of each pattern as a bag's dominant pattern.
    pub mixture: Vec<f64>,
    /// Probability that a malignant bag also holds a second malignant pattern.
    pub second_pattern_rate: f64,
    /// Range of the malignant share of a bag's instances.
    pub malignant_fraction: (f64, f64),
    /// Range of the second malignant pattern's share of the malignant instances.
    #[serde(default = "default_second_share")]
    pub second_share: (f64, f64),
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub count: usize,
    #[serde(default)]
    pub kind: InstanceKind,
    /// Feature mode: instance dimension.
    pub feature_dim: usize,
    /// Feature mode: scale of the pattern means.
    pub separation: f32,
    /// Feature mode: isotropic noise std.
    pub noise_std: f32,
    #[serde(default)]
    pub image: ImageSpec,
}

fn default_second_share() -> (f64, f64) {
    (0.0, 1.0)
}

impl BagRecipe {
    /// Max-rule task over pattern ids `0..c_pat`.
    pub fn max_rule(count: usize, k: usize, c_pat: usize, seed: u64) -> Self {
        Self {
            label_rule: LabelRule::MaxRule,
            pattern_ids: (0..c_pat).collect(),
            mixture: vec![1.0; c_pat],
            second_pattern_rate: 0.5,
            malignant_fraction: (0.1, 0.4),
            second_share: default_second_share(),
            k_min: k,
            k_max: k,
            seed,
            count,
            kind: InstanceKind::Feature,
            feature_dim: 16,
            separation: 1.0,
            noise_std: 1.0,
            image: ImageSpec::default(),
        }
    }

    /// Grade task over patterns {0, 3, 4, 5}.
    pub fn two_pattern_grade(count: usize, k: usize, seed: u64) -> Self {
        Self {
            label_rule: LabelRule::TwoPatternGrade,
            pattern_ids: vec![0, 3, 4, 5],
            mixture: vec![1.0, 1.0, 1.0, 1.0],
            second_pattern_rate: 0.7,
            malignant_fraction: (0.1, 0.4),
            second_share: (0.0, 0.3),
            ..Self::max_rule(count, k, 4, seed)
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.label_rule {
            LabelRule::MaxRule => self.pattern_ids.iter().max().map_or(1, |m| m + 1),
            LabelRule::TwoPatternGrade => GRADE_CLASSES,
        }
    }

    /// Width of one instance as the backbone sees it.
    pub fn instance_shape(&self) -> Vec<usize> {
        match self.kind {
            InstanceKind::Feature => vec![self.feature_dim],
            InstanceKind::Image => vec![image::CHANNELS, self.image.tile, self.image.tile],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let ids = &self.pattern_ids;
        if ids.len() < 2 || ids[0] != 0 {
            return bad("pattern ids must start with the benign pattern 0 and list at least one more".into());
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return bad("pattern ids must be distinct".into());
        }
        if self.label_rule == LabelRule::TwoPatternGrade && ids[1..].iter().any(|p| !GRADE_PATTERNS.contains(p)) {
            return bad(format!("grade rule accepts malignant patterns {GRADE_PATTERNS:?}, got {ids:?}"));
        }
        if self.mixture.len() != ids.len() {
            return bad(format!("mixture has {} weights for {} patterns", self.mixture.len(), ids.len()));
        }
        if self.mixture.iter().any(|w| !w.is_finite() || *w < 0.0) || self.mixture.iter().sum::<f64>() <= 0.0 {
            return bad(format!("mixture weights must be finite, nonnegative and not all zero: {:?}", self.mixture));
        }
        if !(0.0..=1.0).contains(&self.second_pattern_rate) {
            return bad("second_pattern_rate must lie in [0, 1]".into());
        }
        let (lo, hi) = self.malignant_fraction;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("malignant_fraction must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"));
        }
        let (lo, hi) = self.second_share;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("second_share must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})"));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad(format!("need 1 <= k_min <= k_max, got {}..{}", self.k_min, self.k_max));
        }
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        match self.kind {
            InstanceKind::Feature => {
                if self.feature_dim == 0 || !(self.noise_std > 0.0) || !(self.separation > 0.0) {
                    return bad("feature_dim, separation and noise_std must be positive".into());
                }
            }
            InstanceKind::Image => {
                self.image.validate()?;
                if ids.iter().any(|&p| p >= u8::MAX as usize) {
                    return bad("image mode supports pattern ids below 255".into());
                }
            }
        }
        Ok(())
    }

    /// Per-pattern generator parameters, derived from the seed.
    pub fn patterns(&self) -> Vec<PatternSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        self.pattern_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| PatternSpec {
                id,
                mean: (0..self.feature_dim).map(|_| self.separation * normal.sample(&mut rng)).collect(),
                std: self.noise_std,
                texture: Texture::for_index(i),
                intensity: image::intensity_for_index(i),
            })
            .collect()
    }

    fn bag_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Hidden pattern id of every instance of a bag with `k` instances.
    fn composition(&self, rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
        let weights = WeightedIndex::new(&self.mixture).expect("validated mixture");
        let primary = weights.sample(rng);
        let mut patterns = vec![0usize; k];
        if primary != 0 {
            let (lo, hi) = self.malignant_fraction;
            let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let n_mal = ((frac * k as f64).round() as usize).clamp(1, k);
            let others: Vec<usize> = (1..self.pattern_ids.len()).filter(|&j| j != primary && self.mixture[j] > 0.0).collect();
            let second = if n_mal >= 2 && !others.is_empty() && rng.random_bool(self.second_pattern_rate) {
                Some(others[rng.random_range(0..others.len())])
            } else {
                None
            };
            let n_second = second.map_or(0, |_| {
                let (lo, hi) = self.second_share;
                let share = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                ((share * n_mal as f64).round() as usize).clamp(1, n_mal - 1)
            });
            for (i, p) in patterns.iter_mut().take(n_mal).enumerate() {
                *p = if i < n_mal - n_second { primary } else { second.unwrap() };
            }
            patterns.shuffle(rng);
        }
        patterns.into_iter().map(|j| self.pattern_ids[j]).collect()
    }

    fn label(&self, patterns: &[usize]) -> usize {
        match self.label_rule {
            LabelRule::MaxRule => max_rule(patterns),
            LabelRule::TwoPatternGrade => grade_from_patterns(patterns),
        }
    }
}

/// One weakly labelled bag.
#[derive(Clone, Debug)]
pub struct Bag {
    pub id: usize,
    pub label: usize,
    /// `[K×D]` features or `[K×C×t×t]` tiles.
    pub instances: Tensor<f32>,
    /// Hidden pattern id per instance; diagnostics only.
    pub patterns: Vec<usize>,
    /// Image mode: the rendered slide the tiles came from.
    pub slide: Option<Arc<Slide>>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Instances used for evaluation: all foreground tiles in image mode.
    pub fn eval_instances(&self) -> Result<(Tensor<f32>, Vec<usize>)> {
        match &self.slide {
            Some(slide) => slide.tiles(0, None, &mut ChaCha8Rng::seed_from_u64(0)),
            None => Ok((self.instances.clone(), self.patterns.clone())),
        }
    }

    /// Training instances for one epoch: a fresh random tiling in image mode.
    pub fn epoch_instances(&self, rng: &mut impl Rng, k_max: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
        match &self.slide {
            Some(slide) => {
                let offset = rng.random_range(0..slide.tile);
                slide.tiles(offset, Some(k_max), rng)
            }
            None => Ok((self.instances.clone(), self.patterns.clone())),
        }
    }
}

pub fn max_rule(patterns: &[usize]) -> usize {
    patterns.iter().copied().max().unwrap_or(0)
}

/// Grade from the two most frequent malignant patterns (ties toward the higher id).
pub fn grade_from_patterns(patterns: &[usize]) -> usize {
    let mut counts = [0usize; 6];
    for &p in patterns {
        if GRADE_PATTERNS.contains(&p) {
            counts[p] += 1;
        }
    }
    let mut ranked: Vec<usize> = GRADE_PATTERNS.iter().copied().filter(|&p| counts[p] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(b.cmp(&a)));
    let Some(&primary) = ranked.first() else { return 0 };
    let secondary = ranked.get(1).copied().unwrap_or(primary);
    grade_table(primary, secondary)
}

fn grade_table(primary: usize, secondary: usize) -> usize {
    match (primary, secondary) {
        (3, 3) => 1,
        (3, 4) => 2,
        (4, 3) => 3,
        (4, 4) | (3, 5) | (5, 3) => 4,
        (4, 5) | (5, 4) | (5, 5) => 5,
        _ => unreachable!("only malignant patterns are ranked"),
    }
}

/// Generate a dataset from a recipe; feature or image mode per `recipe.kind`.
pub fn generate(recipe: &BagRecipe) -> Result<Vec<Bag>> {
    recipe.validate()?;
    let patterns = recipe.patterns();
    let bags = par::try_map(recipe.count, |i| match recipe.kind {
        InstanceKind::Feature => Ok(feature_bag(recipe, &patterns, i)),
        InstanceKind::Image => image::image_bag(recipe, &patterns, i),
    })?;
    self_check(recipe, &bags)?;
    Ok(bags)
}

/// Feature-mode generator.
pub fn gen_feature_bags(recipe: &BagRecipe) -> Result<Vec<Bag>> {
    if recipe.kind != InstanceKind::Feature {
        return Err(Error::Config("recipe is not in feature mode".into()));
    }
    generate(recipe)
}

/// Image-mode generator: render, tile and subsample each slide.
pub fn render_slide_and_tile(recipe: &BagRecipe) -> Result<Vec<Bag>> {
    if recipe.kind != InstanceKind::Image {
        return Err(Error::Config("recipe is not in image mode".into()));
    }
    generate(recipe)
}

fn feature_bag(recipe: &BagRecipe, patterns: &[PatternSpec], index: usize) -> Bag {
    let mut rng = recipe.bag_rng(index);
    let k = rng.random_range(recipe.k_min..=recipe.k_max);
    let ids = recipe.composition(&mut rng, k);
    let d = recipe.feature_dim;
    let mut data = Vec::with_capacity(k * d);
    for &id in &ids {
        let spec = patterns.iter().find(|p| p.id == id).expect("pattern id from recipe");
        let noise = Normal::new(0.0f32, spec.std).expect("validated std");
        data.extend(spec.mean.iter().map(|&m| m + noise.sample(&mut rng)));
    }
    Bag {
        id: index,
        label: recipe.label(&ids),
        instances: Tensor::new([k, d], data).expect("k, d >= 1"),
        patterns: ids,
        slide: None,
    }
}

/// Recompute every label from the hidden patterns.
pub fn self_check(recipe: &BagRecipe, bags: &[Bag]) -> Result<()> {
    for bag in bags {
        let truth = match &bag.slide {
            Some(slide) => &slide.region_patterns,
            None => &bag.patterns,
        };
        if recipe.label(truth) != bag.label {
            return Err(Error::Data(format!("bag {} label {} disagrees with its patterns", bag.id, bag.label)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grade_examples() {
        assert_eq!(grade_from_patterns(&[0, 0, 0]), 0);
        let mut bag = vec![3; 5];
        bag.extend([4; 3]);
        assert_eq!(grade_from_patterns(&bag), 2);
        let mut tie = vec![4; 4];
        tie.extend([3; 4]);
        assert_eq!(grade_from_patterns(&tie), 3);
        assert_eq!(grade_from_patterns(&[3]), 1);
        assert_eq!(grade_from_patterns(&[5, 0, 3, 3]), 4);
        assert_eq!(grade_from_patterns(&[5, 4, 5, 0]), 5);
    }

    #[test]
    fn grade_depends_on_proportions() {
        let a: Vec<usize> = [vec![3; 5], vec![4; 3]].concat();
        let b: Vec<usize> = [vec![4; 5], vec![3; 3]].concat();
        assert_ne!(grade_from_patterns(&a), grade_from_patterns(&b));
    }

    #[test]
    fn benign_only_recipe_gives_label_zero() {
        let mut r = BagRecipe::two_pattern_grade(50, 8, 3);
        r.mixture = vec![1.0, 0.0, 0.0, 0.0];
        assert!(generate(&r).unwrap().iter().all(|b| b.label == 0));
        let mut r = BagRecipe::max_rule(50, 8, 4, 3);
        r.mixture = vec![1.0, 0.0, 0.0, 0.0];
        assert!(generate(&r).unwrap().iter().all(|b| b.label == 0 && b.patterns.iter().all(|&p| p == 0)));
    }

    #[test]
    fn generation_is_deterministic() {
        let r = BagRecipe::two_pattern_grade(30, 16, 9);
        let a = generate(&r).unwrap();
        let b = generate(&r).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.patterns, y.patterns);
            assert_eq!(
                x.instances.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.instances.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn bag_order_does_not_matter() {
        let r = BagRecipe::max_rule(20, 8, 3, 1);
        let all = generate(&r).unwrap();
        let patterns = r.patterns();
        let lone = feature_bag(&r, &patterns, 13);
        assert_eq!(lone.instances, all[13].instances);
    }

    #[test]
    fn invalid_mixtures_are_rejected() {
        let mut r = BagRecipe::max_rule(5, 4, 3, 0);
        r.mixture = vec![1.0, -1.0, 1.0];
        assert!(generate(&r).is_err());
        r.mixture = vec![0.0; 3];
        assert!(generate(&r).is_err());
        r.mixture = vec![1.0, 1.0];
        assert!(generate(&r).is_err());
        r.mixture = vec![1.0, f64::NAN, 1.0];
        assert!(generate(&r).is_err());
    }

    #[test]
    fn grade_rule_rejects_unknown_patterns() {
        let mut r = BagRecipe::two_pattern_grade(5, 4, 0);
        r.pattern_ids = vec![0, 1, 2, 3];
        assert!(r.validate().is_err());
    }

    #[test]
    fn labels_cover_all_grades() {
        let bags = generate(&BagRecipe::two_pattern_grade(600, 16, 5)).unwrap();
        let mut seen = [0usize; GRADE_CLASSES];
        for b in &bags {
            seen[b.label] += 1;
        }
        assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
    }
}
