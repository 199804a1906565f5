//! Subcommand implementations. Each returns what it wrote so callers and
//! tests can inspect results without re-reading files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dgfnet_core::checkpoint;
use dgfnet_core::data::{make_visual, write_manifest, Split};
use dgfnet_core::dsp::{read_wav, write_wav, Waveform};
use dgfnet_core::eval::{evaluate, EvalReport, Masker};
use dgfnet_core::fusion::FusionMode;
use dgfnet_core::metrics::SourceScore;
use dgfnet_core::model::{prepare_examples, Prepared};
use dgfnet_core::rng::derive_seed;
use dgfnet_core::train::{StepRecord, Trainer};
use dgfnet_core::{Error, ErrorCategory, Tensor};
use serde::Serialize;

use crate::config::{ExperimentConfig, CONFIG_FILE};
use crate::render::{field_png, spectrogram_png};
use crate::runlog::{Event, RunLog, RUNLOG_FILE};

pub const LAST_CHECKPOINT: &str = "checkpoints/last.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_LOSSES_FILE: &str = "ablation_losses.csv";
pub const HISTOGRAM_BINS: usize = 20;

const PROGRESS_EVERY: u64 = 50;
const HEATMAP_SCALE: u32 = 32;
const SPECTROGRAM_SCALE: u32 = 4;
const WAV_VISUAL_SALT: u64 = 0x77a7;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoints/last.ckpt` of the run directory. Only
    /// `train.epochs` may differ from the echoed config.
    pub resume: bool,
    /// Score the test split after training and write `eval.csv`.
    pub final_eval: bool,
    /// When nonzero, the training loss on the first this many training
    /// examples is measured before and after training.
    pub probe_examples: usize,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
    pub report: Option<EvalReport>,
    /// Probe loss before and after training.
    pub probe: Option<(f64, f64)>,
}

fn save_atomic(trainer: &Trainer, path: &Path) -> dgfnet_core::Result<()> {
    let tmp = path.with_extension("tmp");
    trainer.save(&tmp)?;
    Ok(fs::rename(&tmp, path)?)
}

fn params_finite(trainer: &Trainer) -> bool {
    trainer.store.to_map().values().all(Tensor::is_finite)
}

fn probe_loss(trainer: &Trainer, items: &[Prepared]) -> anyhow::Result<f64> {
    let refs: Vec<&Prepared> = items.iter().collect();
    Ok(trainer.batch_loss(&refs)?)
}

pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(dir.join("checkpoints")).map_err(Error::from)?;
    let last = dir.join(LAST_CHECKPOINT);
    let mut trainer = Trainer::new(cfg.model_config(), cfg.train_config())?;
    let resume_at = if opts.resume {
        let mut echoed = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        echoed.train.epochs = cfg.train.epochs;
        if echoed != *cfg {
            bail!(Error::Contract(format!(
                "config differs from the one echoed in {} in more than `train.epochs`",
                dir.display()
            )));
        }
        if !last.exists() {
            bail!(Error::Contract(format!("no checkpoint to resume from at {}", last.display())));
        }
        trainer.resume(&last)?;
        Some(trainer.steps_taken())
    } else {
        None
    };
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).map_err(Error::from)?;
    let mut log = RunLog::open(&dir, resume_at)?;
    log.event(&Event::Start {
        name: cfg.name.clone(),
        fusion: cfg.model.fusion.name().into(),
        resumed_at: resume_at.unwrap_or(0),
    })?;

    let synth = &cfg.data.synth;
    let (train_split, test_split) = (cfg.train_split(), cfg.test_split());
    let probe_items = match opts.probe_examples.min(train_split.len) {
        0 => Vec::new(),
        n => prepare_examples(synth, &cfg.spectral, &train_split, &(0..n).collect::<Vec<_>>())?,
    };
    let initial_probe = match probe_items.is_empty() {
        true => None,
        false => Some(probe_loss(&trainer, &probe_items)?),
    };

    let per_epoch = trainer.steps_per_epoch(train_split.len) as u64;
    let total = per_epoch * cfg.train.epochs as u64;
    let mut saved: Option<PathBuf> = last.exists().then(|| last.clone());
    let result = trainer.run(synth, &cfg.spectral, &train_split, |t, rec| {
        log.step(rec)?;
        let done = rec.step;
        if !opts.quiet && (done % PROGRESS_EVERY == 0 || done == total) {
            eprintln!("step {done}/{total}  loss {:.5}", rec.loss);
        }
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every as u64 == 0 && params_finite(t) {
            save_atomic(t, &last)?;
            saved = Some(last.clone());
            log.event(&Event::Checkpoint {
                step: done,
                path: LAST_CHECKPOINT.into(),
            })?;
        }
        if cfg.train.eval_each_epoch && done % per_epoch == 0 && test_split.len > 0 {
            let report = evaluate(Masker::Model(&t.model, &t.store), synth, &cfg.spectral, &test_split, cfg.eval.filter_taps)?;
            let elapsed = log.elapsed();
            log.event(&Event::eval(done, Some(rec.epoch), test_split.len, report.mean, elapsed))?;
        }
        Ok(())
    });
    let records = match result {
        Ok(r) => r,
        Err(e) => {
            log.event(&Event::Abort {
                step: trainer.steps_taken(),
                error: e.to_string(),
                last_checkpoint: saved.as_ref().map(|_| LAST_CHECKPOINT.to_string()),
            })?;
            return Err(e).context(match saved {
                Some(p) => format!("training aborted; last good checkpoint is {}", p.display()),
                None => "training aborted before any checkpoint was written".to_string(),
            });
        }
    };

    if !params_finite(&trainer) {
        bail!(Error::Numeric("parameters became non-finite at the last step".into()));
    }
    save_atomic(&trainer, &last)?;
    let checkpoint = dir.join(MODEL_FILE);
    save_atomic(&trainer, &checkpoint)?;
    log.event(&Event::Checkpoint {
        step: trainer.steps_taken(),
        path: MODEL_FILE.into(),
    })?;
    let probe = match initial_probe {
        Some(before) => Some((before, probe_loss(&trainer, &probe_items)?)),
        None => None,
    };
    let report = if opts.final_eval && test_split.len > 0 {
        let report = evaluate(
            Masker::Model(&trainer.model, &trainer.store),
            synth,
            &cfg.spectral,
            &test_split,
            cfg.eval.filter_taps,
        )?;
        write_scores(&dir.join(EVAL_FILE), &report)?;
        let elapsed = log.elapsed();
        log.event(&Event::eval(trainer.steps_taken(), None, test_split.len, report.mean, elapsed))?;
        Some(report)
    } else {
        None
    };
    let elapsed_s = log.elapsed();
    log.event(&Event::Finish {
        steps: trainer.steps_taken(),
        elapsed_s,
    })?;
    Ok(TrainOutcome {
        run_dir: dir,
        checkpoint,
        records,
        report,
        probe,
    })
}

/// A trainer restored from `path`, or freshly initialised when `path` is
/// `None`.
pub fn load_trainer(cfg: &ExperimentConfig, path: Option<&Path>) -> anyhow::Result<Trainer> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg.model_config(), cfg.train_config())?;
    if let Some(p) = path {
        trainer.resume(p).with_context(|| format!("loading {}", p.display()))?;
    }
    Ok(trainer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    Model,
    /// The mixture itself as every estimate.
    Mixture,
    /// Ground-truth ratio masks.
    Oracle,
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, scorer: Scorer, out: &Path) -> anyhow::Result<EvalReport> {
    let split = cfg.test_split();
    let report = match scorer {
        Scorer::Model => {
            let path = checkpoint.ok_or_else(|| Error::Contract("model scoring needs a checkpoint".into()))?;
            let t = load_trainer(cfg, Some(path))?;
            evaluate(Masker::Model(&t.model, &t.store), &cfg.data.synth, &cfg.spectral, &split, cfg.eval.filter_taps)?
        }
        Scorer::Mixture => evaluate(Masker::Mixture, &cfg.data.synth, &cfg.spectral, &split, cfg.eval.filter_taps)?,
        Scorer::Oracle => evaluate(Masker::Oracle, &cfg.data.synth, &cfg.spectral, &split, cfg.eval.filter_taps)?,
    };
    write_scores(out, &report)?;
    Ok(report)
}

/// `example_id,source_class,sdr_db,sir_db,sar_db`, one row per separated
/// source, then a `mean,all,...` aggregate row.
pub fn write_scores(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["example_id", "source_class", "sdr_db", "sir_db", "sar_db"])?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    let m = report.mean;
    w.write_record(["mean".to_string(), "all".to_string(), m.sdr.to_string(), m.sir.to_string(), m.sar.to_string()])?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub fusion: FusionMode,
    pub score: SourceScore,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: u64,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub arms: Vec<ArmResult>,
    pub csv: PathBuf,
    pub losses_csv: PathBuf,
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub arms: Vec<FusionMode>,
    pub probe_examples: usize,
    pub quiet: bool,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            arms: FusionMode::ALL.to_vec(),
            probe_examples: 16,
            quiet: false,
        }
    }
}

/// Trains and scores one run per fusion arm under `<run dir>/<arm>`, then
/// writes the comparison tables. If an arm fails, the tables list the
/// finished arms, mark the failed and skipped ones, and the error is
/// returned.
pub fn ablate(cfg: &ExperimentConfig, opts: &AblateOptions) -> anyhow::Result<AblationOutcome> {
    cfg.validate()?;
    if opts.arms.is_empty() {
        bail!(Error::Contract("no ablation arms requested".into()));
    }
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(Error::from)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).map_err(Error::from)?;
    let mut arms = Vec::new();
    let mut failure: Option<(FusionMode, anyhow::Error)> = None;
    for &fusion in &opts.arms {
        if !opts.quiet {
            eprintln!("== arm {}", fusion.label());
        }
        let mut arm_cfg = cfg.with_fusion(fusion);
        arm_cfg.name = format!("{}-{}", cfg.name, fusion.name());
        arm_cfg.output_dir = dir.join(fusion.name());
        let topts = TrainOptions {
            resume: false,
            final_eval: true,
            probe_examples: opts.probe_examples.max(1),
            quiet: opts.quiet,
        };
        match train(&arm_cfg, &topts) {
            Ok(out) => {
                let (initial_loss, final_loss) = out.probe.expect("probe requested");
                arms.push(ArmResult {
                    fusion,
                    score: out.report.map(|r| r.mean).unwrap_or(SourceScore {
                        sdr: f64::NAN,
                        sir: f64::NAN,
                        sar: f64::NAN,
                    }),
                    initial_loss,
                    final_loss,
                    steps: out.records.last().map_or(0, |r| r.step),
                });
            }
            Err(e) => {
                failure = Some((fusion, e));
                break;
            }
        }
    }
    let csv = dir.join(ABLATION_FILE);
    let losses_csv = dir.join(ABLATION_LOSSES_FILE);
    write_ablation(&csv, &losses_csv, &opts.arms, &arms, failure.as_ref().map(|(f, e)| (*f, e.to_string())))?;
    if let Some((fusion, e)) = failure {
        return Err(e.context(format!(
            "ablation arm {} failed; partial results in {}",
            fusion.label(),
            csv.display()
        )));
    }
    Ok(AblationOutcome { arms, csv, losses_csv })
}

fn write_ablation(
    path: &Path,
    losses_path: &Path,
    planned: &[FusionMode],
    done: &[ArmResult],
    failure: Option<(FusionMode, String)>,
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut l = csv::Writer::from_path(losses_path)?;
    w.write_record(["method", "sdr_db", "sir_db", "sar_db", "status"])?;
    l.write_record(["method", "initial_loss", "final_loss", "steps"])?;
    for &fusion in planned {
        if let Some(a) = done.iter().find(|a| a.fusion == fusion) {
            let s = a.score;
            w.write_record([fusion.label(), &s.sdr.to_string(), &s.sir.to_string(), &s.sar.to_string(), "ok"])?;
            l.write_record([fusion.label(), &a.initial_loss.to_string(), &a.final_loss.to_string(), &a.steps.to_string()])?;
        } else {
            let status = match &failure {
                Some((f, msg)) if *f == fusion => format!("failed: {msg}"),
                _ => "not run".to_string(),
            };
            w.write_record([fusion.label(), "", "", "", &status])?;
        }
    }
    w.flush()?;
    l.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateRecord {
    pub example_id: usize,
    pub class_id: usize,
    pub mean_sigma: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GateSummary {
    pub records: usize,
    /// Fraction of records with mean σ in `[0.45, 0.55]`.
    pub near_half: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
    pub low_decile_mean: f64,
    pub high_decile_mean: f64,
    /// `[h, w]` of the heatmaps.
    pub map_shape: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct GateAnalysis {
    pub records: Vec<GateRecord>,
    /// Counts over 20 equal bins of `[0, 1]`.
    pub histogram: Vec<usize>,
    pub low_map: Vec<f64>,
    pub high_map: Vec<f64>,
    pub summary: GateSummary,
}

#[derive(Clone, Debug, Default)]
pub struct GateOptions {
    /// Also write every σ field to `sigma_fields.ckpt`.
    pub dump_fields: bool,
    /// Score only the first this many test examples.
    pub limit: Option<usize>,
}

/// Gate statistics over the test split. Without a checkpoint the model is
/// scored at initialisation.
pub fn analyze_gates(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out_dir: &Path, opts: &GateOptions) -> anyhow::Result<GateAnalysis> {
    if !cfg.model.fusion.gated() {
        bail!(Error::Contract(format!(
            "gate analysis needs a dgfm checkpoint, this run uses fusion `{}`",
            cfg.model.fusion.name()
        )));
    }
    let trainer = load_trainer(cfg, checkpoint)?;
    let split = cfg.test_split();
    let n = opts.limit.unwrap_or(split.len).min(split.len);
    if n == 0 {
        bail!(Error::Contract("no test examples to analyse".into()));
    }
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let mut records = Vec::new();
    let mut maps = Vec::new();
    let mut fields = std::collections::BTreeMap::new();
    let mut shape = [0, 0];
    let ids: Vec<usize> = (0..n).collect();
    for chunk in ids.chunks(cfg.train.batch_size) {
        let items = prepare_examples(&cfg.data.synth, &cfg.spectral, &split, chunk)?;
        let refs: Vec<&Prepared> = items.iter().collect();
        for ((&id, p), pred) in chunk.iter().zip(&items).zip(trainer.predict(&refs)?) {
            for (&class, gate) in p.example.labels.iter().zip(pred.gates) {
                let s = gate.sigma.shape();
                shape = [s[1], s[2]];
                records.push(GateRecord {
                    example_id: id,
                    class_id: class,
                    mean_sigma: gate.mean_sigma,
                });
                maps.push(gate.spatial_mean());
                if opts.dump_fields {
                    fields.insert(format!("example{id:06}.class{class:02}"), gate.sigma);
                }
            }
        }
    }

    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for r in &records {
        let bin = ((r.mean_sigma * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].mean_sigma.total_cmp(&records[b].mean_sigma));
    let decile = records.len().div_ceil(10);
    let average = |idx: &[usize]| -> Vec<f64> {
        let mut out = vec![0.0; maps[0].len()];
        for &i in idx {
            out.iter_mut().zip(&maps[i]).for_each(|(o, v)| *o += v / idx.len() as f64);
        }
        out
    };
    let low_map = average(&order[..decile]);
    let high_map = average(&order[order.len() - decile..]);
    let mean = |m: &[f64]| m.iter().sum::<f64>() / m.len() as f64;
    let sigmas = records.iter().map(|r| r.mean_sigma);
    let summary = GateSummary {
        records: records.len(),
        near_half: records.iter().filter(|r| (0.45..=0.55).contains(&r.mean_sigma)).count() as f64 / records.len() as f64,
        min_sigma: sigmas.clone().fold(f64::INFINITY, f64::min),
        max_sigma: sigmas.fold(f64::NEG_INFINITY, f64::max),
        low_decile_mean: mean(&low_map),
        high_decile_mean: mean(&high_map),
        map_shape: shape,
    };

    let mut w = csv::Writer::from_path(out_dir.join("gate_records.csv"))?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join("gate_histogram.csv"))?;
    w.write_record(["bin_lo", "bin_hi", "count", "fraction"])?;
    for (i, &c) in histogram.iter().enumerate() {
        let lo = i as f64 / HISTOGRAM_BINS as f64;
        let hi = (i + 1) as f64 / HISTOGRAM_BINS as f64;
        w.write_record([lo.to_string(), hi.to_string(), c.to_string(), (c as f64 / records.len() as f64).to_string()])?;
    }
    w.flush()?;
    let lo = low_map.iter().chain(&high_map).cloned().fold(f64::INFINITY, f64::min);
    let hi = low_map.iter().chain(&high_map).cloned().fold(f64::NEG_INFINITY, f64::max);
    field_png(&out_dir.join("gate_low_decile.png"), &low_map, shape[0], shape[1], lo, hi, HEATMAP_SCALE)?;
    field_png(&out_dir.join("gate_high_decile.png"), &high_map, shape[0], shape[1], lo, hi, HEATMAP_SCALE)?;
    fs::write(out_dir.join("gate_summary.json"), serde_json::to_string_pretty(&summary)?).map_err(Error::from)?;
    if opts.dump_fields {
        checkpoint::save(&out_dir.join("sigma_fields.ckpt"), &fields)?;
    }
    let mut events = String::new();
    for r in &records {
        events.push_str(&serde_json::to_string(&Event::Gate {
            example_id: r.example_id,
            class_id: r.class_id,
            mean_sigma: r.mean_sigma,
        })?);
        events.push('\n');
    }
    use std::io::Write;
    fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(out_dir.join(RUNLOG_FILE))
        .and_then(|mut f| f.write_all(events.as_bytes()))
        .map_err(Error::from)?;
    Ok(GateAnalysis {
        records,
        histogram,
        low_map,
        high_map,
        summary,
    })
}

#[derive(Clone, Debug)]
pub enum MixtureInput {
    Wav(PathBuf),
    /// Index into the test split.
    Example(usize),
}

#[derive(Clone, Debug)]
pub struct Separated {
    pub class: usize,
    pub waveform: Waveform,
    pub wav: PathBuf,
    pub png: PathBuf,
}

/// Loads the mixture to separate, fitted to the configured clip length.
pub fn load_mixture(cfg: &ExperimentConfig, input: &MixtureInput) -> anyhow::Result<(Waveform, Option<usize>)> {
    let synth = &cfg.data.synth;
    match input {
        MixtureInput::Example(i) => Ok((cfg.test_split().example(synth, *i)?.mixture, Some(*i))),
        MixtureInput::Wav(path) => {
            let w = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
            let w = if w.sample_rate() == synth.sample_rate {
                w
            } else {
                w.resample(synth.sample_rate)?
            };
            Ok((w.fit_length(synth.clip_len), None))
        }
    }
}

pub fn separate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    input: &MixtureInput,
    classes: &[usize],
    out_dir: &Path,
) -> anyhow::Result<Vec<Separated>> {
    let synth = &cfg.data.synth;
    if classes.is_empty() {
        bail!(Error::Contract("no classes requested".into()));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= synth.classes) {
        bail!(Error::Contract(format!("unknown class {c}; the model knows 0..{}", synth.classes)));
    }
    let trainer = load_trainer(cfg, Some(checkpoint))?;
    let (mixture, example) = load_mixture(cfg, input)?;
    let source_example = match example {
        Some(i) => Some(cfg.test_split().example(synth, i)?),
        None => None,
    };
    let visuals = classes
        .iter()
        .map(|&c| {
            if let Some(ex) = &source_example {
                if let Some(k) = ex.labels.iter().position(|&l| l == c) {
                    return Ok(ex.visuals[k].clone());
                }
            }
            let seed = match &source_example {
                Some(ex) => derive_seed(ex.seed ^ WAV_VISUAL_SALT, c as u64),
                None => derive_seed(cfg.data.test_seed ^ WAV_VISUAL_SALT, c as u64),
            };
            Ok(make_visual(synth, &synth.class(c)?, &mixture, seed)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let prepared = Prepared::unlabelled(mixture.clone(), classes.to_vec(), visuals, &cfg.spectral)?;
    let waves = dgfnet_core::eval::separate_prepared(Masker::Model(&trainer.model, &trainer.store), &[&prepared], &cfg.spectral)?
        .pop()
        .expect("one mixture in, one out");
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    spectrogram_png(&out_dir.join("mixture.png"), &mixture, &cfg.spectral.stft, SPECTROGRAM_SCALE)?;
    classes
        .iter()
        .zip(waves)
        .enumerate()
        .map(|(i, (&class, waveform))| {
            let stem = format!("{i:02}_class{class:02}");
            let wav = out_dir.join(format!("{stem}.wav"));
            let png = out_dir.join(format!("{stem}.png"));
            write_wav(&wav, &waveform)?;
            spectrogram_png(&png, &waveform, &cfg.spectral.stft, SPECTROGRAM_SCALE)?;
            Ok(Separated { class, waveform, wav, png })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct GenDataOptions {
    /// Export WAVs (mixture plus sources) for the first this many examples
    /// of each split.
    pub wav_examples: usize,
}

/// Writes `train_manifest.jsonl` and `test_manifest.jsonl`, optionally with
/// WAV exports under `wavs/<split>/`.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path, opts: &GenDataOptions) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let mut written = Vec::new();
    for (name, split) in [("train", cfg.train_split()), ("test", cfg.test_split())] {
        written.push(write_split(cfg, out_dir, name, &split, opts.wav_examples)?);
    }
    Ok(written)
}

fn write_split(cfg: &ExperimentConfig, out_dir: &Path, name: &str, split: &Split, wavs: usize) -> anyhow::Result<PathBuf> {
    let synth = &cfg.data.synth;
    let mut records = split.manifest(synth)?;
    let wav_dir = out_dir.join("wavs").join(name);
    if wavs > 0 {
        fs::create_dir_all(&wav_dir).map_err(Error::from)?;
    }
    for (i, rec) in records.iter_mut().enumerate().take(wavs) {
        let ex = split.example(synth, i)?;
        let mut files = vec![(format!("{i:06}_mix.wav"), ex.mixture.clone())];
        for (k, (s, c)) in ex.sources.iter().zip(&ex.labels).enumerate() {
            files.push((format!("{i:06}_src{k}_class{c:02}.wav"), s.clone()));
        }
        for (file, w) in files {
            write_wav(&wav_dir.join(&file), &w)?;
            rec.wavs.push(format!("wavs/{name}/{file}"));
        }
    }
    let path = out_dir.join(format!("{name}_manifest.jsonl"));
    fs::write(&path, write_manifest(&records)).map_err(Error::from)?;
    Ok(path)
}

/// Process exit code for an error: 2 contract, 3 numeric, 4 IO, 1 other.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.category() {
                ErrorCategory::Contract => 2,
                ErrorCategory::Numeric => 3,
                ErrorCategory::Io => 4,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<image::ImageError>() {
            return 4;
        }
        if cause.is::<serde_json::Error>() {
            return 4;
        }
    }
    1
}
