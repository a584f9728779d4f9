//! A full MIL model: backbone feature scales feeding one MIL head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::heads::{bag_predict, softmax_row, BagOutput, HeadVariant, MilHead, MilHeadSpec};
use crate::nn::{Backbone, BackboneSpec, Bound, ParamGroup, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: MilHeadSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.head.variant == HeadVariant::PyramidTransformer && self.backbone.scales() < 1 {
            return Err(Error::Config("pyramid head needs at least one backbone scale".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    params: ParamStore<T>,
    backbone: Backbone,
    head: MilHead,
}

/// Plain-value outputs of one bag's forward pass.
#[derive(Clone, Debug)]
pub struct BagInference<T> {
    pub bag_logits: Vec<T>,
    pub bag_probs: Vec<T>,
    pub class: usize,
    /// Pooling weight per instance; sums to one.
    pub attention: Vec<T>,
    /// Row-major `[K×C]` softmax of the instance logits.
    pub instance_probs: Vec<T>,
    /// Per encoder block, each head's row-major `[K×K]` attention matrix.
    pub self_attention: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Model<T> {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new(seed);
        let backbone = Backbone::new(&mut params, &spec.backbone)?;
        let head = MilHead::new(&mut params, &spec.head, spec.backbone.stage_dims())?;
        Ok(Self {
            spec: spec.clone(),
            params,
            backbone,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn head(&self) -> &MilHead {
        &self.head
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.head.num_classes
    }

    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Bound {
        self.params.bind(g, track)
    }

    pub fn forward_var(&self, g: &mut Graph<T>, p: &Bound, instances: Var) -> Result<BagOutput> {
        let scales = self.backbone.forward(g, p, instances)?;
        self.head.forward(g, p, &scales)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, instances: &Tensor<T>) -> Result<BagOutput> {
        let x = g.constant(instances.shape().to_vec(), instances.data().to_vec())?;
        self.forward_var(g, p, x)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, instances: &Tensor<T>) -> Result<BagInference<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward(&mut g, &p, instances)?;
        let bag_logits = g.value(out.bag_logits).to_vec();
        let (class, bag_probs) = bag_predict(&bag_logits);
        let c = self.num_classes();
        let instance_probs = g.value(out.instance_logits).chunks_exact(c).flat_map(softmax_row).collect();
        let self_attention = out
            .self_attention
            .iter()
            .map(|block| block.iter().map(|&m| g.value(m).to_vec()).collect())
            .collect();
        Ok(BagInference {
            bag_logits,
            bag_probs,
            class,
            attention: g.value(out.attention).to_vec(),
            instance_probs,
            self_attention,
        })
    }

    /// Names of parameters owned by transformer encoder blocks.
    pub fn transformer_param_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.group == ParamGroup::Transformer)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }
}
