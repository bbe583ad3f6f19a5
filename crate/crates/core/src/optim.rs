//! Adam with per-tensor state keyed by parameter name.
//!
//! One instance serves every loss step of a run. Tensors that receive no
//! gradient in a step (an auxiliary head absent from the objective) keep
//! their moments and step count untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite()) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    pub fn insert_state(&mut self, name: String, moments: Moments<T>) {
        self.state.insert(name, moments);
    }

    /// Applies one update to every weight of `params` that has a same-named
    /// tensor in `grads`.
    pub fn step(&mut self, params: &mut impl Module<T>, grads: &impl Module<T>) -> Result<()> {
        let grads: BTreeMap<String, &Tensor<T>> = grads
            .tensors()
            .into_iter()
            .filter(|(_, kind, _)| *kind == ParamKind::Weight)
            .map(|(n, _, t)| (n, t))
            .collect();
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, kind, p) in params.tensors_mut() {
            if kind != ParamKind::Weight {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}", g.shape())));
            }
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                t: 0,
            });
            st.t += 1;
            let step = lr * (1.0 - beta2.powi(st.t as i32)).sqrt() / (1.0 - beta1.powi(st.t as i32));
            let (b1, b2) = (T::lit(beta1), T::lit(beta2));
            let (c1, c2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
            let (step, eps_hat) = (T::lit(step), T::lit(eps * (1.0 - beta2.powi(st.t as i32)).sqrt()));
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
            {
                *m = b1 * *m + c1 * gi;
                *v = b2 * *v + c2 * gi * gi;
                *w -= step * *m / (v.sqrt() + eps_hat);
            }
        }
        Ok(())
    }
}
