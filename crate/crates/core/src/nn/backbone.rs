//! Small multi-scale instance encoders standing in for a pretrained CNN.
//!
//! Every stage output is one feature scale. The MLP kind consumes feature
//! bags `[K×D]`; the conv kind consumes image bags `[K×C×H×W]` with stride-2
//! 3×3 stages, each spatially mean-pooled to `[K×channels]`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::params::{Bound, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    Mlp { input_dim: usize, stage_dims: Vec<usize> },
    Conv { in_channels: usize, stage_channels: Vec<usize> },
}

impl BackboneSpec {
    pub fn scales(&self) -> usize {
        self.stage_dims().len()
    }

    pub fn stage_dims(&self) -> &[usize] {
        match self {
            BackboneSpec::Mlp { stage_dims, .. } => stage_dims,
            BackboneSpec::Conv { stage_channels, .. } => stage_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_dims().is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stage_dims().contains(&0) {
            return Err(Error::Config("backbone stage width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvStage {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
enum Stages {
    Mlp(Vec<Linear>),
    Conv(Vec<ConvStage>),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    stages: Stages,
}

pub const CONV_KERNEL: usize = 3;

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let stages = match spec {
            BackboneSpec::Mlp { input_dim, stage_dims } => {
                let mut prev = *input_dim;
                let mut layers = Vec::new();
                for (i, &d) in stage_dims.iter().enumerate() {
                    layers.push(Linear::new(store, &format!("backbone.stage{i}"), prev, d, true, ParamGroup::Base));
                    prev = d;
                }
                Stages::Mlp(layers)
            }
            BackboneSpec::Conv { in_channels, stage_channels } => {
                let mut prev = *in_channels;
                let mut layers = Vec::new();
                for (i, &c) in stage_channels.iter().enumerate() {
                    let fan_in = prev * CONV_KERNEL * CONV_KERNEL;
                    layers.push(ConvStage {
                        weight: store.add(format!("backbone.stage{i}.weight"), &[c, prev, CONV_KERNEL, CONV_KERNEL], Init::FanIn(fan_in), ParamGroup::Base),
                        bias: store.add(format!("backbone.stage{i}.bias"), &[c], Init::FanIn(fan_in), ParamGroup::Base),
                    });
                    prev = c;
                }
                Stages::Conv(layers)
            }
        };
        Ok(Self { spec: spec.clone(), stages })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Per-scale feature matrices `[K×d_s]`, one per stage.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        match (&self.stages, &self.spec) {
            (Stages::Mlp(layers), BackboneSpec::Mlp { input_dim, .. }) => {
                match *g.shape(x) {
                    [k, d] if k >= 1 && d == *input_dim => {}
                    ref s => return Err(Error::shape("backbone(mlp)", s, &[0, *input_dim])),
                }
                let mut h = x;
                let mut scales = Vec::with_capacity(layers.len());
                for layer in layers {
                    let y = layer.forward(g, p, h)?;
                    h = g.relu(y);
                    scales.push(h);
                }
                Ok(scales)
            }
            (Stages::Conv(layers), BackboneSpec::Conv { in_channels, .. }) => {
                match *g.shape(x) {
                    [k, c, _, _] if k >= 1 && c == *in_channels => {}
                    ref s => return Err(Error::shape("backbone(conv)", s, &[0, *in_channels, 0, 0])),
                }
                let mut h = x;
                let mut scales = Vec::with_capacity(layers.len());
                for stage in layers {
                    let y = g.conv2d(h, p.var(stage.weight), Some(p.var(stage.bias)), 2, 1)?;
                    h = g.relu(y);
                    scales.push(g.mean_pool(h, &[2, 3])?);
                }
                Ok(scales)
            }
            _ => unreachable!("stages are built from the spec"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(spec: BackboneSpec, shape: Vec<usize>, data: Vec<f64>) -> (Graph<f64>, Vec<Var>) {
        let mut store = ParamStore::<f64>::new(11);
        let bb = Backbone::new(&mut store, &spec).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(shape, data).unwrap();
        let scales = bb.forward(&mut g, &p, x).unwrap();
        (g, scales)
    }

    #[test]
    fn mlp_single_scale_shape() {
        let spec = BackboneSpec::Mlp { input_dim: 3, stage_dims: vec![5] };
        let (g, scales) = run(spec, vec![4, 3], vec![0.5; 12]);
        assert_eq!(scales.len(), 1);
        assert_eq!(g.shape(scales[0]), &[4, 5]);
    }

    #[test]
    fn conv_shapes_for_56_patches() {
        let spec = BackboneSpec::Conv { in_channels: 3, stage_channels: vec![16, 32, 64] };
        let n = 56 * 3 * 32 * 32;
        let data: Vec<f64> = (0..n).map(|i| ((i % 97) as f64) / 97.0).collect();
        let (g, scales) = run(spec, vec![56, 3, 32, 32], data);
        let dims: Vec<_> = scales.iter().map(|&s| g.shape(s).to_vec()).collect();
        assert_eq!(dims, vec![vec![56, 16], vec![56, 32], vec![56, 64]]);
    }

    #[test]
    fn constant_patches_give_identical_rows() {
        let spec = BackboneSpec::Conv { in_channels: 3, stage_channels: vec![4, 8] };
        let (g, scales) = run(spec, vec![3, 3, 8, 8], vec![0.42; 3 * 3 * 64]);
        for &s in &scales {
            let d = g.shape(s)[1];
            let v = g.value(s);
            for k in 1..3 {
                assert_eq!(&v[..d], &v[k * d..(k + 1) * d]);
            }
        }
    }

    #[test]
    fn mismatched_input_is_rejected() {
        let mut store = ParamStore::<f64>::new(0);
        let bb = Backbone::new(&mut store, &BackboneSpec::Mlp { input_dim: 3, stage_dims: vec![2] }).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant([2, 4], vec![0.0; 8]).unwrap();
        assert!(bb.forward(&mut g, &p, x).is_err());
    }
}
