//! Learnable parameters and first-order optimizers.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Owns every parameter of a model together with per-parameter Adam state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    moments: Vec<Option<AdamMoments>>,
    adam_steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        self.moments.push(None);
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in t.data_mut() {
                *v = dist.sample(rng);
            }
        }
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    fn check_grads(&self) -> Result<()> {
        for p in &self.params {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite(alloc::format!("gradient of {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        self.check_grads()?;
        for p in &mut self.params {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update. Nothing is modified when any
    /// gradient is non-finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.check_grads()?;
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let bc1 = 1.0 - crate::math::powi(cfg.beta1, t);
        let bc2 = 1.0 - crate::math::powi(cfg.beta2, t);
        for (p, state) in self.params.iter_mut().zip(self.moments.iter_mut()) {
            let n = p.value.len();
            let st = state.get_or_insert_with(|| AdamMoments {
                m: alloc::vec![0.0; n],
                v: alloc::vec![0.0; n],
            });
            for i in 0..n {
                let g = p.grad.data()[i];
                st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
                st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                p.value.data_mut()[i] -= cfg.lr * mhat / (crate::math::sqrt(vhat) + cfg.eps);
            }
        }
        Ok(())
    }
}
