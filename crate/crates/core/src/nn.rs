//! Parameterised layers over [`Graph`] plus the forward context that threads
//! the store, train/eval mode and batch-norm bookkeeping through a model.

use crate::autodiff::{BatchNormMode, Conv2dAttrs, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub mode: BatchNormMode,
    /// Training-mode batch-norm outputs by layer name, for running-stat
    /// updates after the step.
    pub bn_records: Vec<(String, Var)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, mode: BatchNormMode) -> Self {
        Self {
            g,
            store,
            mode,
            bn_records: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.g.param(self.store, name)
    }

    /// Folds the recorded batch statistics into the running buffers.
    pub fn update_running_stats(&self, store: &mut ParamStore) -> Result<()> {
        fold_running_stats(self.g, &self.bn_records, store)
    }
}

/// `running ← (1 − m)·running + m·batch` for each recorded batch-norm output.
pub fn fold_running_stats(g: &Graph, records: &[(String, Var)], store: &mut ParamStore) -> Result<()> {
    for (name, v) in records {
        let stats = g
            .batch_stats(*v)
            .ok_or_else(|| Error::contract(format!("`{name}` has no batch statistics")))?;
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let key = format!("{name}.{suffix}");
            let t = store
                .get_mut(&key)
                .ok_or_else(|| Error::contract(format!("missing buffer `{key}`")))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        Self::with_gain(store, name, c_in, c_out, k, stride, bias, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        store.add_fan_in_uniform(&format!("{name}.w"), &[c_out, c_in, k, k], fan_in, gain)?;
        if bias {
            store.add_param(&format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        }
        Ok(Self {
            name: name.to_string(),
            c_in,
            c_out,
            k,
            stride,
            bias,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(&format!("{}.w", self.name))?;
        let b = if self.bias {
            Some(cx.param(&format!("{}.b", self.name))?)
        } else {
            None
        };
        let attrs = Conv2dAttrs {
            stride: self.stride,
            padding: None,
            groups: 1,
        };
        cx.g.conv2d(x, w, b, attrs)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        store.add_param(&format!("{name}.gamma"), Tensor::ones(&[channels]))?;
        store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
        store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?;
        Ok(Self {
            name: name.to_string(),
            channels,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.param(&format!("{}.gamma", self.name))?;
        let beta = cx.param(&format!("{}.beta", self.name))?;
        match cx.mode {
            BatchNormMode::Train => {
                let y = cx.g.batch_norm(x, gamma, beta, BatchNormMode::Train, None, BN_EPS)?;
                cx.bn_records.push((self.name.clone(), y));
                Ok(y)
            }
            BatchNormMode::Eval => {
                let m = buffer(cx.store, &format!("{}.running_mean", self.name))?;
                let v = buffer(cx.store, &format!("{}.running_var", self.name))?;
                cx.g.batch_norm(x, gamma, beta, BatchNormMode::Eval, Some((m, v)), BN_EPS)
            }
        }
    }
}

fn buffer<'s>(store: &'s ParamStore, name: &str) -> Result<&'s [f64]> {
    store
        .get(name)
        .map(|t| t.data())
        .ok_or_else(|| Error::contract(format!("missing buffer `{name}`")))
}

/// conv → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), c_in, c_out, k, stride, false)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        cx.g.relu(y)
    }
}

/// Affine map on the last axis: `[.., d_in] → [.., d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_gain(store, name, d_in, d_out, bias, 1.0)
    }

    pub fn with_gain(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Result<Self> {
        store.add_fan_in_uniform(&format!("{name}.w"), &[d_in, d_out], d_in, gain)?;
        if bias {
            store.add_param(&format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        }
        Ok(Self {
            name: name.to_string(),
            d_in,
            d_out,
            bias,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        if s.last() != Some(&self.d_in) {
            return Err(Error::shape("linear", format!("`{}` expects last axis {}, got {s:?}", self.name, self.d_in)));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let flat = cx.g.reshape(x, &[rows, self.d_in])?;
        let w = cx.param(&format!("{}.w", self.name))?;
        let mut y = cx.g.matmul(flat, w)?;
        if self.bias {
            let b = cx.param(&format!("{}.b", self.name))?;
            y = cx.g.add_bc(y, b)?;
        }
        let mut out = s;
        *out.last_mut().unwrap() = self.d_out;
        cx.g.reshape(y, &out)
    }
}
