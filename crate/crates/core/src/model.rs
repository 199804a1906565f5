//! The full separator: U-Net audio branch, bottleneck fusion, query
//! decoder and mask head, plus the spectral front end that turns a
//! [`MixtureExample`] into network inputs and targets.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::{DataConfig, MixtureExample, Split, VisualFeature};
use crate::dsp::{self, istft, stft, LogGrid, Magnitude, Spectrogram, StftParams, Waveform};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionMode};
use crate::masks::{self, MaskMap};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{mask_heads, DecoderDims, DecoderTrace, QueryDecoder, TransformerConfig};
use crate::unet::{UNet, UNetConfig};

/// Parameters under this prefix form the decoupled-weight-decay group.
pub const TRANSFORMER_PREFIX: &str = "transformer.";

/// Offset inside the log of the network input, so silent cells stay finite.
const INPUT_OFFSET: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub stft: StftParams,
    /// Log-frequency bins fed to the network.
    pub log_bins: usize,
    pub mask_floor: f64,
    pub mask_cap: f64,
}

impl SpectralConfig {
    pub fn desk() -> Self {
        Self {
            stft: StftParams::DESK,
            log_bins: 64,
            mask_floor: masks::DEFAULT_FLOOR,
            mask_cap: masks::DEFAULT_CAP,
        }
    }

    pub fn full() -> Self {
        Self {
            stft: StftParams::FULL,
            log_bins: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.stft.target_frames.is_none() {
            return Err(Error::contract("the model needs a fixed frame count"));
        }
        LogGrid::new(self.stft.bins(), self.log_bins)?;
        if !(self.mask_floor > 0.0) || !(self.mask_cap > 0.0 && self.mask_cap <= masks::MAX_CAP) {
            return Err(Error::contract(format!(
                "mask floor {} / cap {} out of range",
                self.mask_floor, self.mask_cap
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.stft.target_frames.unwrap_or(0)
    }

    /// Clip length whose padded analysis yields exactly `frames()` frames
    /// with the least padding: the largest power of two not above the span.
    pub fn natural_clip_len(&self) -> usize {
        let span = self.stft.span(self.frames());
        1usize << (usize::BITS - 1 - span.leading_zeros())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub object_dim: usize,
    pub motion_dim: usize,
    pub fusion: FusionMode,
    /// `attention` is overridden by the fusion mode.
    pub unet: UNetConfig,
    pub transformer: TransformerConfig,
}

impl ModelConfig {
    /// Desk-scale network sized for `data`.
    pub fn desk(data: &DataConfig, fusion: FusionMode) -> Self {
        Self {
            classes: data.classes,
            object_dim: data.object_dim,
            motion_dim: data.motion_dim,
            fusion,
            unet: UNetConfig::default(),
            transformer: TransformerConfig {
                width: 64,
                ..TransformerConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.object_dim == 0 || self.motion_dim == 0 {
            return Err(Error::contract("model needs ≥ 2 classes and positive feature widths"));
        }
        self.effective_unet().validate()?;
        self.transformer.validate()
    }

    pub fn effective_unet(&self) -> UNetConfig {
        UNetConfig {
            attention: self.fusion.attention(),
            ..self.unet.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub unet: UNet,
    pub fusion: Option<Fusion>,
    pub decoder: QueryDecoder,
}

/// Network inputs for `B` mixtures decoded into `R` source rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    /// `[B, 1, F, T]` log-compressed log-frequency mixture magnitude.
    pub spec: Tensor,
    /// Mixture index of each row.
    pub rows: Vec<usize>,
    pub classes: Vec<usize>,
    /// `[R, object_dim]`.
    pub objects: Tensor,
    /// `[R, motion_frames, motion_dim]`.
    pub motion: Tensor,
}

impl BatchInput {
    pub fn examples(&self) -> usize {
        self.spec.shape()[0]
    }
}

pub struct Forward {
    /// `[R, 1, F, T]` in (0, 1).
    pub masks: Var,
    /// Encoder bottleneck `[B, bottleneck, h, w]`.
    pub bottleneck: Var,
    /// Bottleneck replacement fed to the decoder `[R, bottleneck, h, w]`.
    pub fused: Var,
    pub sigma: Option<Var>,
    /// Final audio features `[R, C'_A, F, T]`.
    pub features: Var,
    pub trace: DecoderTrace,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let unet = UNet::new(store, "unet", cfg.effective_unet())?;
        let fusion = if cfg.fusion.fuses() {
            Some(Fusion::new(store, "fusion", cfg.object_dim, cfg.unet.bottleneck_channels, cfg.fusion.gated())?)
        } else {
            None
        };
        let dims = DecoderDims {
            classes: cfg.classes,
            object_dim: cfg.object_dim,
            motion_dim: cfg.motion_dim,
            audio_dim: cfg.unet.bottleneck_channels,
            mask_dim: cfg.unet.final_channels,
        };
        let decoder = QueryDecoder::new(store, TRANSFORMER_PREFIX.trim_end_matches('.'), cfg.transformer.clone(), dims)?;
        Ok(Self { cfg, unet, fusion, decoder })
    }

    pub fn forward(&self, cx: &mut Ctx, batch: &BatchInput) -> Result<Forward> {
        let r = batch.rows.len();
        if batch.classes.len() != r || batch.objects.shape() != [r, self.cfg.object_dim] {
            return Err(Error::contract(format!(
                "batch has {r} rows, {} classes, objects {:?}",
                batch.classes.len(),
                batch.objects.shape()
            )));
        }
        let b = batch.examples();
        if batch.rows.iter().any(|&i| i >= b) {
            return Err(Error::contract("row refers to a missing mixture"));
        }
        let x = cx.g.constant(batch.spec.clone());
        let enc = self.unet.encode(cx, x)?;
        let identity = r == b && batch.rows.iter().enumerate().all(|(i, &j)| i == j);
        let mid = if identity {
            enc.bottleneck
        } else {
            cx.g.select_rows(enc.bottleneck, &batch.rows)?
        };
        let object = cx.g.constant(batch.objects.clone());
        let (fused, sigma) = match (&self.fusion, self.cfg.fusion) {
            (None, _) => (mid, None),
            (Some(f), FusionMode::Mul) => (f.fuse_mul_only(cx, object, mid)?, None),
            (Some(f), _) => {
                let av = f.fuse_multiplicative(cx, object, mid)?;
                let (fd, s) = f.dgfm(cx, av, mid)?;
                (fd, Some(s))
            }
        };
        let features = self.unet.decode(cx, &enc, fused, &batch.rows)?;
        let motion = cx.g.constant(batch.motion.clone());
        let mut trace = DecoderTrace::default();
        let embedding = self.decoder.forward(cx, object, motion, fused, &batch.classes, &mut trace)?;
        let masks = mask_heads(cx, embedding, features)?;
        Ok(Forward {
            masks,
            bottleneck: enc.bottleneck,
            fused,
            sigma,
            features,
            trace,
        })
    }
}

pub fn is_transformer_param(name: &str) -> bool {
    name.starts_with(TRANSFORMER_PREFIX)
}

/// Spectral front end of one mixture.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub example: MixtureExample,
    pub grid: Arc<LogGrid>,
    /// Linear-axis complex mixture spectrum, for reconstruction.
    pub mix_stft: Spectrogram,
    pub mix_log: Magnitude,
    pub source_log: Vec<Magnitude>,
    pub gt_masks: Vec<MaskMap>,
}

impl Prepared {
    pub fn new(example: MixtureExample, spectral: &SpectralConfig) -> Result<Self> {
        let mix_stft = stft(&example.mixture, &spectral.stft)?;
        let mix_log = dsp::log_resample(&mix_stft.magnitude(), spectral.log_bins)?;
        let source_log = example
            .sources
            .iter()
            .map(|s| dsp::log_resample(&stft(s, &spectral.stft)?.magnitude(), spectral.log_bins))
            .collect::<Result<Vec<_>>>()?;
        let gt_masks = source_log
            .iter()
            .map(|s| masks::ground_truth_mask(s, &mix_log, spectral.mask_floor, spectral.mask_cap))
            .collect::<Result<Vec<_>>>()?;
        let grid = match &mix_log.axis {
            dsp::FreqAxis::Log(g) => g.clone(),
            dsp::FreqAxis::Linear => unreachable!("log_resample returns a log axis"),
        };
        Ok(Self {
            example,
            grid,
            mix_stft,
            mix_log,
            source_log,
            gt_masks,
        })
    }

    /// A mixture with queried classes but no known sources. The mixture
    /// stands in for every source, so the ground-truth masks are
    /// meaningless and only inference is possible.
    pub fn unlabelled(mixture: Waveform, labels: Vec<usize>, visuals: Vec<VisualFeature>, spectral: &SpectralConfig) -> Result<Self> {
        if labels.is_empty() || labels.len() != visuals.len() {
            return Err(Error::contract(format!(
                "{} classes but {} visual features",
                labels.len(),
                visuals.len()
            )));
        }
        let example = MixtureExample {
            seed: 0,
            sources: vec![mixture.clone(); labels.len()],
            labels,
            visuals,
            mixture,
        };
        Self::new(example, spectral)
    }

    pub fn network_input(&self) -> Vec<f64> {
        self.mix_log.data.iter().map(|m| (m + INPUT_OFFSET).ln()).collect()
    }

    /// Maps a log-grid mask onto the linear axis, applies it to the mixture
    /// spectrum (keeping mixture phase) and inverts.
    pub fn reconstruct(&self, log_mask: &[f64], stft_params: &StftParams) -> Result<Waveform> {
        let linear = self.grid.inverse(log_mask, self.mix_log.frames);
        let masked = self.mix_stft.apply_real_mask(&linear)?;
        istft(&masked, stft_params)
    }
}

/// Stacks prepared mixtures into a batch with one row per source, plus the
/// matching ground-truth mask tensor `[R, 1, F, T]`.
pub fn make_batch(items: &[&Prepared]) -> Result<(BatchInput, Tensor)> {
    let first = items.first().ok_or_else(|| Error::contract("empty batch"))?;
    let (f, t) = (first.mix_log.bins, first.mix_log.frames);
    let v0 = &first.example.visuals[0];
    let (co, cm, tm) = (v0.object.len(), v0.motion_dim, v0.motion_frames);
    let mut spec = Vec::with_capacity(items.len() * f * t);
    let (mut rows, mut classes, mut objects, mut motion, mut gt) = (vec![], vec![], vec![], vec![], vec![]);
    for (i, p) in items.iter().enumerate() {
        if p.mix_log.bins != f || p.mix_log.frames != t {
            return Err(Error::contract("batch items differ in spectrogram shape"));
        }
        spec.extend(p.network_input());
        for (k, &c) in p.example.labels.iter().enumerate() {
            let v = &p.example.visuals[k];
            if v.object.len() != co || v.motion_dim != cm || v.motion_frames != tm {
                return Err(Error::contract("batch items differ in visual feature shape"));
            }
            rows.push(i);
            classes.push(c);
            objects.extend_from_slice(&v.object);
            // stored channel-major; tokens are frames
            for fr in 0..tm {
                motion.extend((0..cm).map(|ch| v.motion[ch * tm + fr]));
            }
            gt.extend_from_slice(&p.gt_masks[k].values);
        }
    }
    let r = rows.len();
    Ok((
        BatchInput {
            spec: Tensor::new(&[items.len(), 1, f, t], spec)?,
            rows,
            classes,
            objects: Tensor::new(&[r, co], objects)?,
            motion: Tensor::new(&[r, tm, cm], motion)?,
        },
        Tensor::new(&[r, 1, f, t], gt)?,
    ))
}

/// Generates and prepares examples `indices` of a split in parallel; the
/// result is in index order and independent of thread count.
pub fn prepare_examples(data: &DataConfig, spectral: &SpectralConfig, split: &Split, indices: &[usize]) -> Result<Vec<Prepared>> {
    indices
        .par_iter()
        .map(|&i| Prepared::new(split.example(data, i)?, spectral))
        .collect()
}
