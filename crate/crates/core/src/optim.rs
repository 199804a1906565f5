//! Adaptive-moment optimizer with optional decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for a whole store. Each parameter gets a decoupled weight
/// decay coefficient from a caller-supplied rule, so one instance covers
/// both the AdamW group (decay > 0) and the plain Adam group (decay = 0).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: AdamParams,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(hyper: AdamParams) -> Result<Self> {
        if !(hyper.lr > 0.0) {
            return Err(Error::contract(format!("learning rate must be positive, got {}", hyper.lr)));
        }
        Ok(Self {
            hyper,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`.
    ///
    /// With decay `λ` the update is
    /// `p ← p − lr·(m̂ / (√v̂ + ε) + λ·p)`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        decay: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = store
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("`{name}` is {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let lambda = decay(name);
            let n = g.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(name).unwrap().data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + lambda * p[i]);
            }
        }
        Ok(())
    }

    /// Flattens the optimizer state into named tensors under `prefix`.
    pub fn state_tensors(&self, store: &ParamStore, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(format!("{prefix}step"), Tensor::scalar(self.step as f64));
        for (kind, map) in [("m", &self.first), ("v", &self.second)] {
            for (name, data) in map {
                let shape = store.get(name).map(|t| t.shape().to_vec()).unwrap_or(vec![data.len()]);
                out.insert(format!("{prefix}{kind}.{name}"), Tensor::from_parts(shape, data.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        let step = tensors
            .get(&format!("{prefix}step"))
            .ok_or_else(|| Error::Format("missing optimizer step".into()))?
            .item()?;
        self.step = step as u64;
        self.first.clear();
        self.second.clear();
        for (key, t) in tensors {
            let Some(rest) = key.strip_prefix(prefix) else { continue };
            if let Some(name) = rest.strip_prefix("m.") {
                self.first.insert(name.to_string(), t.data().to_vec());
            } else if let Some(name) = rest.strip_prefix("v.") {
                self.second.insert(name.to_string(), t.data().to_vec());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.add_param("p", Tensor::from_vec(v.to_vec()).unwrap()).unwrap();
        s
    }

    fn grads(v: &[f64]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::from_vec(v.to_vec()).unwrap())])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store_with(&[1.5, -2.0]);
        let mut opt = Adam::new(AdamParams::default()).unwrap();
        opt.step(&mut s, &grads(&[0.0, 0.0]), |_| 0.0).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let mut s = store_with(&[1.5, -2.0]);
        let hyper = AdamParams { lr: 0.01, ..Default::default() };
        let mut opt = Adam::new(hyper).unwrap();
        opt.step(&mut s, &grads(&[0.0, 0.0]), |_| 1e-4).unwrap();
        let f = 1.0 - 0.01 * 1e-4;
        let got = s.get("p").unwrap().data();
        assert!((got[0] - 1.5 * f).abs() < 1e-15);
        assert!((got[1] + 2.0 * f).abs() < 1e-15);
    }

    #[test]
    fn converges_to_quadratic_minimizer() {
        // loss = 0.5 * a * (x - b)^2, minimizer x* = b.
        let (a, b) = (3.0, -0.7);
        let mut s = store_with(&[2.0]);
        let mut opt = Adam::new(AdamParams { lr: 0.05, ..Default::default() }).unwrap();
        for _ in 0..1000 {
            let x = s.get("p").unwrap().data()[0];
            opt.step(&mut s, &grads(&[a * (x - b)]), |_| 0.0).unwrap();
        }
        assert!((s.get("p").unwrap().data()[0] - b).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Adam::new(AdamParams { lr: 0.0, ..Default::default() }).is_err());
        let mut s = store_with(&[1.0]);
        let mut opt = Adam::new(AdamParams::default()).unwrap();
        let mut g = grads(&[1.0]);
        g.get_mut("p").unwrap().data_mut()[0] = f64::INFINITY;
        let err = opt.step(&mut s, &g, |_| 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("`p`")));
    }
}
