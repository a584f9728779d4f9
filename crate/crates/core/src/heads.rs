//! Bag classifiers: Max-MIL, attention and gated-attention pooling, and the
//! flat and pyramid transformer-over-instances variants.
//!
//! Every head maps instance features to bag logits `[1×C]`, instance logits
//! `[K×C]` and a pooling weight per instance `[1×K]`. Instance logits use the
//! same classifier as the bag logits, applied to the same (encoded) instance
//! embeddings the pooling consumes, so bag logits are the attention-weighted
//! sum of instance logits.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, EncoderBlock, Linear, NormPlacement, ParamGroup, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Max,
    Attention,
    GatedAttention,
    Transformer,
    PyramidTransformer,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::Max,
        HeadVariant::Attention,
        HeadVariant::GatedAttention,
        HeadVariant::Transformer,
        HeadVariant::PyramidTransformer,
    ];

    pub fn label(self) -> &'static str {
        match self {
            HeadVariant::Max => "Max MIL",
            HeadVariant::Attention => "Attention MIL",
            HeadVariant::GatedAttention => "Gated attention MIL",
            HeadVariant::Transformer => "Transformer MIL",
            HeadVariant::PyramidTransformer => "Pyramid Transformer MIL",
        }
    }
}

fn default_attention_dim() -> usize {
    64
}
fn default_depth() -> usize {
    4
}
fn default_heads() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilHeadSpec {
    pub variant: HeadVariant,
    pub num_classes: usize,
    /// Hidden width L of the attention MLP.
    #[serde(default = "default_attention_dim")]
    pub attention_dim: usize,
    /// Encoder blocks per level (transformer variants).
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// Feed-forward width; defaults to the model width.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    #[serde(default)]
    pub norm: NormPlacement,
    /// Use a separate projection for instance logits instead of the bag classifier.
    #[serde(default)]
    pub separate_instance_head: bool,
}

impl MilHeadSpec {
    pub fn new(variant: HeadVariant, num_classes: usize) -> Self {
        Self {
            variant,
            num_classes,
            attention_dim: default_attention_dim(),
            depth: default_depth(),
            num_heads: default_heads(),
            ffn_dim: None,
            norm: NormPlacement::Pre,
            separate_instance_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.attention_dim == 0 {
            return Err(Error::Config("attention_dim must be positive".into()));
        }
        let uses_encoder = matches!(self.variant, HeadVariant::Transformer | HeadVariant::PyramidTransformer);
        if uses_encoder && self.depth > 0 && self.num_heads == 0 {
            return Err(Error::Config("num_heads must be positive".into()));
        }
        Ok(())
    }
}

/// a = softmax(tanh(H·V)·w) (optionally gated by sigmoid(H·U)), z = aᵀH.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub v: Linear,
    pub u: Option<Linear>,
    pub w: Linear,
}

impl AttentionPool {
    pub fn new<T: Real>(store: &mut ParamStore<T>, in_dim: usize, hidden: usize, gated: bool) -> Self {
        Self {
            v: Linear::new(store, "head.pool.v", in_dim, hidden, false, ParamGroup::Base),
            u: gated.then(|| Linear::new(store, "head.pool.u", in_dim, hidden, false, ParamGroup::Base)),
            w: Linear::new(store, "head.pool.w", hidden, 1, false, ParamGroup::Base),
        }
    }

    /// Returns (z `[1×M]`, a `[1×K]`).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<(Var, Var)> {
        let k = match *g.shape(h) {
            [k, m] if k >= 1 && m == self.v.in_dim => k,
            ref s => return Err(Error::shape("attention_pool", s, &[0, self.v.in_dim])),
        };
        let hv = self.v.forward(g, p, h)?;
        let mut hidden = g.tanh(hv);
        if let Some(u) = &self.u {
            let hu = u.forward(g, p, h)?;
            let gate = g.sigmoid(hu);
            hidden = g.mul(hidden, gate)?;
        }
        let scores = self.w.forward(g, p, hidden)?;
        let scores = g.reshape(scores, [1, k])?;
        let a = g.softmax(scores, 1)?;
        let z = g.matmul(a, h)?;
        Ok((z, a))
    }
}

/// Graph-level outputs of a head for one bag.
pub struct BagOutput {
    pub bag_logits: Var,
    pub attention: Var,
    pub instance_logits: Var,
    pub encoded: Var,
    /// Per encoder block (in order), each head's K×K self-attention matrix.
    pub self_attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct MilHead {
    spec: MilHeadSpec,
    levels: Vec<Vec<EncoderBlock>>,
    level_dims: Vec<usize>,
    pool: Option<AttentionPool>,
    classifier: Linear,
    instance_classifier: Option<Linear>,
}

impl MilHead {
    /// `scale_dims` are the backbone's per-scale widths.
    pub fn new<T: Real>(store: &mut ParamStore<T>, spec: &MilHeadSpec, scale_dims: &[usize]) -> Result<Self> {
        spec.validate()?;
        let last = *scale_dims.last().ok_or_else(|| Error::Config("backbone has no scales".into()))?;
        let mut levels = Vec::new();
        let mut level_dims = Vec::new();
        let level_inputs: Vec<usize> = match spec.variant {
            HeadVariant::Transformer => vec![last],
            HeadVariant::PyramidTransformer => {
                let mut dims = Vec::with_capacity(scale_dims.len());
                let mut prev = 0;
                for &d in scale_dims {
                    prev += d;
                    dims.push(prev);
                }
                dims
            }
            _ => Vec::new(),
        };
        for (level, &dim) in level_inputs.iter().enumerate() {
            let ffn = spec.ffn_dim.unwrap_or(dim);
            let blocks = (0..spec.depth)
                .map(|i| EncoderBlock::new(store, &format!("head.level{level}.encoder.{i}"), dim, spec.num_heads, ffn, spec.norm))
                .collect::<Result<Vec<_>>>()?;
            levels.push(blocks);
            level_dims.push(dim);
        }
        let model_dim = level_dims.last().copied().unwrap_or(last);
        let pool = match spec.variant {
            HeadVariant::Max => None,
            HeadVariant::GatedAttention => Some(AttentionPool::new(store, model_dim, spec.attention_dim, true)),
            _ => Some(AttentionPool::new(store, model_dim, spec.attention_dim, false)),
        };
        let classifier = Linear::with_zero_bias(store, "head.classifier", model_dim, spec.num_classes, ParamGroup::Base);
        let instance_classifier = spec
            .separate_instance_head
            .then(|| Linear::with_zero_bias(store, "head.instance_classifier", model_dim, spec.num_classes, ParamGroup::Base));
        Ok(Self {
            spec: spec.clone(),
            levels,
            level_dims,
            pool,
            classifier,
            instance_classifier,
        })
    }

    pub fn spec(&self) -> &MilHeadSpec {
        &self.spec
    }

    /// Input width of each encoder level (pyramid: previous level width + scale width).
    pub fn level_dims(&self) -> &[usize] {
        &self.level_dims
    }

    fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, level: usize, mut h: Var, maps: &mut Vec<Vec<Var>>) -> Result<Var> {
        for block in &self.levels[level] {
            let out = block.forward(g, p, h)?;
            maps.push(out.maps);
            h = out.output;
        }
        Ok(h)
    }

    fn instance_logits<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        self.instance_classifier.as_ref().unwrap_or(&self.classifier).forward(g, p, h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, scales: &[Var]) -> Result<BagOutput> {
        let last = *scales.last().ok_or_else(|| Error::Config("no feature scales".into()))?;
        let mut maps = Vec::new();
        let encoded = match self.spec.variant {
            HeadVariant::Max | HeadVariant::Attention | HeadVariant::GatedAttention => last,
            HeadVariant::Transformer => self.encode(g, p, 0, last, &mut maps)?,
            HeadVariant::PyramidTransformer => {
                if scales.len() != self.levels.len() {
                    return Err(Error::Config(format!(
                        "pyramid head built for {} scales, got {}",
                        self.levels.len(),
                        scales.len()
                    )));
                }
                let mut t = self.encode(g, p, 0, scales[0], &mut maps)?;
                for (level, &f) in scales.iter().enumerate().skip(1) {
                    let joined = g.concat(&[t, f], 1)?;
                    t = self.encode(g, p, level, joined, &mut maps)?;
                }
                t
            }
        };

        if self.spec.variant == HeadVariant::Max {
            let logits = self.classifier.forward(g, p, encoded)?;
            let k = g.shape(logits)[0];
            let chosen = select_max_instance(g.value(logits), self.spec.num_classes);
            let bag_logits = g.select_rows(logits, &[chosen])?;
            let mut onehot = vec![T::zero(); k];
            onehot[chosen] = T::one();
            let attention = g.constant([1, k], onehot)?;
            let instance_logits = match &self.instance_classifier {
                Some(c) => c.forward(g, p, encoded)?,
                None => logits,
            };
            return Ok(BagOutput {
                bag_logits,
                attention,
                instance_logits,
                encoded,
                self_attention: maps,
            });
        }

        let pool = self.pool.as_ref().expect("attention variants own a pool");
        let (z, attention) = pool.forward(g, p, encoded)?;
        let bag_logits = self.classifier.forward(g, p, z)?;
        let instance_logits = self.instance_logits(g, p, encoded)?;
        Ok(BagOutput {
            bag_logits,
            attention,
            instance_logits,
            encoded,
            self_attention: maps,
        })
    }
}

/// Instance whose largest non-background class probability is highest;
/// ties go to the lowest index.
pub fn select_max_instance<T: Real>(logits: &[T], classes: usize) -> usize {
    let mut best = (0usize, T::neg_infinity());
    for (k, row) in logits.chunks_exact(classes).enumerate() {
        let probs = softmax_row(row);
        let score = probs[1..].iter().copied().fold(T::neg_infinity(), T::max);
        if score > best.1 {
            best = (k, score);
        }
    }
    best.0
}

pub fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax probabilities and the argmax class (ties toward the lower id).
pub fn bag_predict<T: Real>(bag_logits: &[T]) -> (usize, Vec<T>) {
    let probs = softmax_row(bag_logits);
    (argmax(&probs), probs)
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
