//! Named, ordered parameter storage shared by every layer of a model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Backbone and MIL-head parameters.
    Base,
    /// Parameters owned by transformer encoder blocks: own learning rate, weight decay.
    Transformer,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// U(−1/√fan_in, 1/√fan_in)
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    seed: u64,
}

/// FNV-1a, stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            seed,
        }
    }

    /// Registers a parameter. Its initial value depends only on the store
    /// seed and the parameter name, never on registration order.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        let n = numel(shape);
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::FanIn(fan_in) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
            }
        };
        let tensor = Tensor::new(shape.to_vec(), data).expect("parameter shape is consistent").with_grad();
        self.params.push(Param { name, group, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Records every parameter on `g`. With `track` false they are constants.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if track {
                        g.input(&p.tensor)
                    } else {
                        g.constant(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("same shape")
                    }
                })
                .collect(),
        )
    }

    /// Gradients of every parameter after `g.backward`, zeros where unreached.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(&bound.0)
            .map(|(p, &v)| g.grad(v).map_or_else(|| vec![T::zero(); p.tensor.len()], <[T]>::to_vec))
            .collect()
    }

    /// Adds `grads` (one buffer per parameter, in order) into the tensors' grad buffers.
    pub fn accumulate(&mut self, grads: &[Vec<T>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.tensor.accumulate_grad(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn values(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.tensor.data().to_vec()).collect()
    }

    pub fn set_values(&mut self, values: &[Vec<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Config(format!("expected {} parameter tensors, got {}", self.params.len(), values.len())));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if v.len() != p.tensor.len() {
                return Err(Error::shape("set_values", p.tensor.shape(), &[v.len()]));
            }
            p.tensor.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            seed: self.seed,
        }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps vars already recorded for each parameter, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}
