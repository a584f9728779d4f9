use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::params::{Bound, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// y = x·Wᵀ + b with W[out×in].
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, bias: bool, group: ParamGroup) -> Self {
        let weight = store.add(format!("{name}.weight"), &[out_dim, in_dim], Init::FanIn(in_dim), group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_dim], Init::FanIn(in_dim), group));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Same as [`Linear::new`] with a zero-initialized bias.
    pub fn with_zero_bias<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup) -> Self {
        let weight = store.add(format!("{name}.weight"), &[out_dim, in_dim], Init::FanIn(in_dim), group);
        let bias = Some(store.add(format!("{name}.bias"), &[out_dim], Init::Zeros, group));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul_nt(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[dim], Init::Ones, group),
            shift: store.add(format!("{name}.shift"), &[dim], Init::Zeros, group),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.shift), T::of(LAYER_NORM_EPS))
    }
}

/// Multi-head scaled dot-product self-attention over the rows of H[K×d].
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of one attention call: the projected output and each head's K×K matrix.
pub struct AttentionOutput {
    pub output: Var,
    pub maps: Vec<Var>,
}

impl MultiHeadSelfAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, group: ParamGroup) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide model dim {dim}")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, group),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, group),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, group),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, group),
            heads,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<AttentionOutput> {
        match *g.shape(h) {
            [k, d] if k >= 1 && d == self.dim => {}
            ref s => return Err(Error::shape("multihead_self_attention", s, &[0, self.dim])),
        }
        let q = self.query.forward(g, p, h)?;
        let k = self.key.forward(g, p, h)?;
        let v = self.value.forward(g, p, h)?;
        let head_dim = self.dim / self.heads;
        let scale = T::one() / T::of(head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let start = head * head_dim;
                (g.narrow(q, 1, start, head_dim)?, g.narrow(k, 1, start, head_dim)?, g.narrow(v, 1, start, head_dim)?)
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
            maps.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Ok(AttentionOutput {
            output: self.out.forward(g, p, merged)?,
            maps,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// x + f(LN(x))
    #[default]
    Pre,
    /// LN(x + f(x))
    Post,
}

/// Transformer encoder block with equal input, output and hidden widths by default.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: MultiHeadSelfAttention,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub placement: NormPlacement,
}

impl EncoderBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, ffn_dim: usize, placement: NormPlacement) -> Result<Self> {
        let group = ParamGroup::Transformer;
        Ok(Self {
            attention: MultiHeadSelfAttention::new(store, &format!("{name}.attn"), dim, heads, group)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, group),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, group),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ffn_dim, true, group),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn_dim, dim, true, group),
            placement,
        })
    }

    fn feed_forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let hidden = self.ff1.forward(g, p, x)?;
        let hidden = g.relu(hidden);
        self.ff2.forward(g, p, hidden)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<AttentionOutput> {
        match self.placement {
            NormPlacement::Pre => {
                let normed = self.norm1.forward(g, p, h)?;
                let attn = self.attention.forward(g, p, normed)?;
                let x1 = g.add(h, attn.output)?;
                let normed = self.norm2.forward(g, p, x1)?;
                let ff = self.feed_forward(g, p, normed)?;
                Ok(AttentionOutput {
                    output: g.add(x1, ff)?,
                    maps: attn.maps,
                })
            }
            NormPlacement::Post => {
                let attn = self.attention.forward(g, p, h)?;
                let x1 = g.add(h, attn.output)?;
                let x1 = self.norm1.forward(g, p, x1)?;
                let ff = self.feed_forward(g, p, x1)?;
                let x2 = g.add(x1, ff)?;
                Ok(AttentionOutput {
                    output: self.norm2.forward(g, p, x2)?,
                    maps: attn.maps,
                })
            }
        }
    }
}
