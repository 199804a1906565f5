//! Mini-batch training loop, inference and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Graph};
use crate::checkpoint;
use crate::data::{DataConfig, Split};
use crate::error::{Error, Result};
use crate::fusion::GateField;
use crate::masks::{separation_loss, MaskKind, MaskMap};
use crate::model::{is_transformer_param, make_batch, prepare_examples, Model, ModelConfig, Prepared, SpectralConfig};
use crate::nn::{fold_running_stats, Ctx};
use crate::optim::{Adam, AdamParams};
use crate::params::ParamStore;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

const OPTIM_PREFIX: &str = "optim.";
const STEP_KEY: &str = "train.step";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Decoupled weight decay of the transformer parameters; the rest of the
    /// network gets none.
    pub transformer_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed of parameter initialisation and of the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            transformer_decay: 1e-4,
            batch_size: 8,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.transformer_decay >= 0.0) || self.batch_size == 0 {
            return Err(Error::contract(format!(
                "bad training settings: lr {}, decay {}, batch {}",
                self.lr, self.transformer_decay, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    /// Updates completed, counting this one.
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    /// Batch-mean gate coefficient, for gated models.
    pub mean_sigma: Option<f64>,
}

/// Inference output for one mixture.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub masks: Vec<MaskMap>,
    pub gates: Vec<GateField>,
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub opt: Adam,
    pub cfg: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let model = Model::new(&mut store, model_cfg)?;
        let opt = Adam::new(AdamParams {
            lr: cfg.lr,
            ..AdamParams::default()
        })?;
        Ok(Self {
            model,
            store,
            opt,
            cfg,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn decay_for(&self, name: &str) -> f64 {
        if is_transformer_param(name) {
            self.cfg.transformer_decay
        } else {
            0.0
        }
    }

    /// Forward, loss, backward and one optimizer update on a batch.
    pub fn step(&mut self, items: &[&Prepared]) -> Result<(f64, Option<f64>)> {
        let (batch, gt) = make_batch(items)?;
        let mut g = Graph::new();
        let (loss, mean_sigma, grads, records) = {
            let mut cx = Ctx::new(&mut g, &self.store, BatchNormMode::Train);
            let out = self.model.forward(&mut cx, &batch)?;
            let target = cx.g.constant(gt);
            let loss = separation_loss(cx.g, out.masks, target, items.len())?;
            let value = cx.g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at step {}", self.step)));
            }
            let mean_sigma = out.sigma.map(|s| cx.g.value(s).mean());
            let grads = cx.g.backward(loss)?.for_params(&self.store);
            let records = std::mem::take(&mut cx.bn_records);
            (value, mean_sigma, grads, records)
        };
        fold_running_stats(&g, &records, &mut self.store)?;
        let decay: BTreeMap<String, f64> = grads.keys().map(|k| (k.clone(), self.decay_for(k))).collect();
        self.opt.step(&mut self.store, &grads, |n| decay[n])?;
        self.step += 1;
        Ok((loss, mean_sigma))
    }

    /// Training-mode loss on a batch without touching parameters or
    /// running statistics.
    pub fn batch_loss(&self, items: &[&Prepared]) -> Result<f64> {
        let (batch, gt) = make_batch(items)?;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, BatchNormMode::Train);
        let out = self.model.forward(&mut cx, &batch)?;
        let target = cx.g.constant(gt);
        let loss = separation_loss(cx.g, out.masks, target, items.len())?;
        cx.g.value(loss).item()
    }

    /// Example order of an epoch: a seeded permutation, the same on every
    /// run and independent of where training was resumed.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed ^ 0x5eed, epoch as u64)));
        idx
    }

    pub fn steps_per_epoch(&self, len: usize) -> usize {
        len.div_ceil(self.cfg.batch_size)
    }

    /// Trains until `cfg.epochs` are complete, continuing from the current
    /// step, calling `on_step` after every update.
    pub fn run(
        &mut self,
        data: &DataConfig,
        spectral: &SpectralConfig,
        split: &Split,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let per_epoch = self.steps_per_epoch(split.len);
        let total = (per_epoch * self.cfg.epochs) as u64;
        let mut out = Vec::new();
        while self.step < total {
            let epoch = (self.step / per_epoch as u64) as usize;
            let within = (self.step % per_epoch as u64) as usize;
            let order = self.epoch_order(epoch, split.len);
            let lo = within * self.cfg.batch_size;
            let hi = (lo + self.cfg.batch_size).min(split.len);
            let prepared = prepare_examples(data, spectral, split, &order[lo..hi])?;
            let refs: Vec<&Prepared> = prepared.iter().collect();
            let (loss, mean_sigma) = self.step(&refs)?;
            let rec = StepRecord {
                step: self.step,
                epoch,
                loss,
                mean_sigma,
            };
            on_step(self, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Eval-mode masks and gate fields for each mixture.
    pub fn predict(&self, items: &[&Prepared]) -> Result<Vec<Prediction>> {
        predict(&self.model, &self.store, items)
    }

    pub fn checkpoint_map(&self) -> BTreeMap<String, Tensor> {
        let mut map = self.store.to_map();
        map.extend(self.opt.state_tensors(&self.store, OPTIM_PREFIX));
        map.insert(STEP_KEY.to_string(), Tensor::scalar(self.step as f64));
        map
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_map())
    }

    /// Restores parameters, buffers, optimizer moments and the step count.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let params: BTreeMap<String, Tensor> = map
            .iter()
            .filter(|(k, _)| !k.starts_with(OPTIM_PREFIX) && k.as_str() != STEP_KEY)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        self.store.load_map(&params)?;
        if map.keys().any(|k| k.starts_with(OPTIM_PREFIX)) {
            self.opt.load_state(map, OPTIM_PREFIX)?;
        }
        self.step = match map.get(STEP_KEY) {
            Some(t) => t.item()? as u64,
            None => 0,
        };
        Ok(())
    }

    pub fn resume(&mut self, path: &Path) -> Result<()> {
        self.load_map(&checkpoint::load(path)?)
    }
}

/// Eval-mode inference, one graph per call.
pub fn predict(model: &Model, store: &ParamStore, items: &[&Prepared]) -> Result<Vec<Prediction>> {
    let (batch, _) = make_batch(items)?;
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, store, BatchNormMode::Eval);
    let out = model.forward(&mut cx, &batch)?;
    let masks = cx.g.value(out.masks).clone();
    let sigma = match out.sigma {
        Some(s) => GateField::split_rows(cx.g.value(s))?,
        None => Vec::new(),
    };
    let s = masks.shape().to_vec();
    let (f, t) = (s[2], s[3]);
    let mut rows = masks.data().chunks(f * t);
    let mut gates = sigma.into_iter();
    items
        .iter()
        .map(|p| {
            let k = p.example.labels.len();
            let masks = (0..k)
                .map(|_| MaskMap::new(f, t, rows.next().unwrap().to_vec(), MaskKind::Predicted))
                .collect::<Result<Vec<_>>>()?;
            let gates = gates.by_ref().take(if model.cfg.fusion.gated() { k } else { 0 }).collect();
            Ok(Prediction { masks, gates })
        })
        .collect()
}
