//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Reduction;
use crate::bagsynth::{self, Bag, BagRecipe};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::nn::BackboneSpec;

/// Where the bags come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Recipe(BagRecipe),
    Manifest(PathBuf),
    Jsonl(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<Bag>> {
        match self {
            DataSource::Recipe(r) => bagsynth::generate(r),
            DataSource::Manifest(p) => bagsynth::load_manifest(p)?.generate(),
            DataSource::Jsonl(p) => bagsynth::read_jsonl(p),
        }
    }
}

fn d_epochs() -> usize {
    50
}
fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    3e-4
}
fn d_tlr() -> f64 {
    3e-5
}
fn d_wd() -> f64 {
    0.1
}
fn d_lambda() -> f64 {
    100.0
}
fn d_reduction() -> Reduction {
    Reduction::Sum
}
fn d_folds() -> usize {
    5
}
fn d_ensemble() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Bags per optimizer step.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Peak learning rate of backbone and head parameters.
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Peak learning rate of transformer encoder parameters.
    #[serde(default = "d_tlr")]
    pub transformer_lr: f64,
    /// Decoupled weight decay of transformer encoder parameters.
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Weight of the instance pseudo-label loss.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// How instance losses combine within a bag.
    #[serde(default = "d_reduction")]
    pub patch_reduction: Reduction,
    #[serde(default = "d_folds")]
    pub folds: usize,
    /// Models per fold in the pseudo-labelling ensemble.
    #[serde(default = "d_ensemble")]
    pub ensemble: usize,
    #[serde(default)]
    pub seed: u64,
    /// Retrain from the ensemble weights instead of a fresh initialization.
    #[serde(default)]
    pub warm_start: bool,
}

impl TrainConfig {
    /// A config with every training default.
    pub fn new(model: ModelSpec, data: DataSource) -> Self {
        Self {
            model,
            data,
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            transformer_lr: d_tlr(),
            weight_decay: d_wd(),
            lambda: d_lambda(),
            patch_reduction: d_reduction(),
            folds: d_folds(),
            ensemble: d_ensemble(),
            seed: 0,
            warm_start: false,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Dataset paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataSource::Manifest(p) | DataSource::Jsonl(p) = &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.transformer_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.lambda >= 0.0) {
            return bad("weight_decay and lambda must be nonnegative");
        }
        if self.folds < 2 || self.ensemble == 0 {
            return bad("need folds >= 2 and ensemble >= 1");
        }
        Ok(())
    }

    /// Check the model can consume the dataset's bags.
    pub fn check_compatible(&self, bags: &[Bag]) -> Result<()> {
        let first = bags.first().ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let expected: Vec<usize> = match &self.model.backbone {
            BackboneSpec::Mlp { input_dim, .. } => vec![*input_dim],
            BackboneSpec::Conv { in_channels, .. } => vec![*in_channels, 0, 0],
        };
        let got = &first.instances.shape()[1..];
        let fits = got.len() == expected.len() && (got.len() == 3 || got == expected.as_slice()) && got[0] == expected[0];
        if !fits {
            return Err(Error::Data(format!("model expects instances shaped {expected:?}, dataset has {got:?}")));
        }
        let classes = self.model.num_classes();
        if let Some(b) = bags.iter().find(|b| b.label >= classes) {
            return Err(Error::Data(format!("bag {} has label {} but the model has {classes} classes", b.id, b.label)));
        }
        Ok(())
    }
}

/// Mix a base seed with job coordinates (SplitMix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
