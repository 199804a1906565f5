//! Test-set scoring of reconstructed waveforms.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{DataConfig, Split};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::metrics::{bss_eval, mixture_baseline, SourceScore};
use crate::model::{prepare_examples, Model, Prepared, SpectralConfig};
use crate::params::ParamStore;
use crate::train::predict;

const CHUNK: usize = 8;

/// Where the masks come from.
#[derive(Clone, Copy)]
pub enum Masker<'a> {
    Model(&'a Model, &'a ParamStore),
    /// Ground-truth ratio masks; an upper bound for any model.
    Oracle,
    /// No masking: the mixture itself is every estimate.
    Mixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExampleScore {
    pub example_id: usize,
    pub source_class: usize,
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ExampleScore>,
    pub mean: SourceScore,
}

/// Separated waveforms of one prepared mixture, one per source row.
pub fn separate_prepared(masker: Masker, items: &[&Prepared], spectral: &SpectralConfig) -> Result<Vec<Vec<Waveform>>> {
    match masker {
        Masker::Mixture => Ok(items
            .iter()
            .map(|p| vec![p.example.mixture.clone(); p.example.sources.len()])
            .collect()),
        Masker::Oracle => items
            .iter()
            .map(|p| {
                p.gt_masks
                    .iter()
                    .map(|m| p.reconstruct(&m.values, &spectral.stft))
                    .collect()
            })
            .collect(),
        Masker::Model(model, store) => {
            let preds = predict(model, store, items)?;
            items
                .iter()
                .zip(preds)
                .map(|(p, pred)| {
                    pred.masks
                        .iter()
                        .map(|m| p.reconstruct(&m.values, &spectral.stft))
                        .collect()
                })
                .collect()
        }
    }
}

pub fn evaluate(
    masker: Masker,
    data: &DataConfig,
    spectral: &SpectralConfig,
    split: &Split,
    taps: usize,
) -> Result<EvalReport> {
    if split.len == 0 {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let mut rows = Vec::with_capacity(split.len * split.k);
    let ids: Vec<usize> = (0..split.len).collect();
    for chunk in ids.chunks(CHUNK) {
        let prepared = prepare_examples(data, spectral, split, chunk)?;
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let estimates = separate_prepared(masker, &refs, spectral)?;
        let scored: Vec<Vec<SourceScore>> = prepared
            .par_iter()
            .zip(estimates.par_iter())
            .map(|(p, est)| match masker {
                Masker::Mixture => mixture_baseline(&p.example.mixture, &p.example.sources, taps),
                _ => bss_eval(est, &p.example.sources, taps),
            })
            .collect::<Result<_>>()?;
        for ((&id, p), scores) in chunk.iter().zip(&prepared).zip(scored) {
            for (&class, s) in p.example.labels.iter().zip(scores) {
                rows.push(ExampleScore {
                    example_id: id,
                    source_class: class,
                    sdr_db: s.sdr,
                    sir_db: s.sir,
                    sar_db: s.sar,
                });
            }
        }
    }
    let all: Vec<SourceScore> = rows
        .iter()
        .map(|r| SourceScore {
            sdr: r.sdr_db,
            sir: r.sir_db,
            sar: r.sar_db,
        })
        .collect();
    let mean = SourceScore::mean(&all).expect("nonempty split");
    Ok(EvalReport { rows, mean })
}
