//! Adam with decoupled weight decay on one parameter group, and the cosine
//! learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Learning rate and decoupled weight decay for one step, per group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub base_lr: f64,
    pub transformer_lr: f64,
    /// Applied to [`ParamGroup::Transformer`] parameters only.
    pub weight_decay: f64,
}

impl StepRates {
    fn for_group(&self, group: ParamGroup) -> (f64, f64) {
        match group {
            ParamGroup::Base => (self.base_lr, 0.0),
            ParamGroup::Transformer => (self.transformer_lr, self.weight_decay),
        }
    }

    /// Both rates scaled by the same schedule factor.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base_lr: self.base_lr * factor,
            transformer_lr: self.transformer_lr * factor,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], rates: StepRates) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.tensor.len() {
                return Err(Error::shape("adam", p.tensor.shape(), &[g.len()]));
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} contains {}", p.name, bad.as_f64())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - T::of(BETA1).powi(t);
        let c2 = T::one() - T::of(BETA2).powi(t);
        let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(EPSILON));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (lr, wd) = rates.for_group(p.group);
            let (lr, decay) = (T::of(lr), T::of(lr * wd));
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = *w - decay * *w - lr * update;
            }
        }
        Ok(())
    }
}

/// α₀·½(1 + cos(π·step/total)).
pub fn cosine_lr(step: usize, total: usize, base: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} is past the schedule end {total}")));
    }
    Ok(base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn store(group: ParamGroup) -> ParamStore<f64> {
        let mut s = ParamStore::new(0);
        s.add("w", &[1], Init::Ones, group);
        s
    }

    const RATES: StepRates = StepRates {
        base_lr: 0.01,
        transformer_lr: 0.001,
        weight_decay: 0.1,
    };

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut s = store(ParamGroup::Base);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[vec![0.0]], RATES).unwrap();
        assert_eq!(s.values(), vec![vec![1.0]]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(ParamGroup::Base);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[vec![1.0]], RATES).unwrap();
        let expected = 1.0 - 0.01 / (1.0 + EPSILON);
        assert!((s.values()[0][0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_applies_to_transformer_group_only() {
        let mut base = store(ParamGroup::Base);
        let mut tr = store(ParamGroup::Transformer);
        let (mut a, mut b) = (Adam::new(&base), Adam::new(&tr));
        a.step(&mut base, &[vec![0.0]], RATES).unwrap();
        b.step(&mut tr, &[vec![0.0]], RATES).unwrap();
        assert_eq!(base.values()[0][0], 1.0);
        assert!((tr.values()[0][0] - (1.0 - 0.001 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store(ParamGroup::Base);
        let mut adam = Adam::new(&s);
        let err = adam.step(&mut s, &[vec![f64::NAN]], RATES).unwrap_err();
        assert!(err.to_string().contains("gradient of w"), "{err}");
        assert_eq!(s.values()[0][0], 1.0);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 3e-4).unwrap(), 3e-4);
        assert!(cosine_lr(100, 100, 3e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 3e-4).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!(cosine_lr(0, 0, 1.0).is_err());
        assert!(cosine_lr(3, 2, 1.0).is_err());
        let lrs: Vec<f64> = (0..=37).map(|s| cosine_lr(s, 37, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
