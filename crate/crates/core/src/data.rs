//! Synthetic harmonic sources, their mixtures, and stand-in visual
//! condition features.
//!
//! Every class has a fixed timbre: a fundamental range, a harmonic
//! amplitude profile and an amplitude-envelope family. In the default mode
//! the fundamental ranges are disjoint, so classes are separable by pitch
//! as well as timbre; `hard` mode overlaps them.

use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{mix, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Lowest fundamental of class 0.
const BASE_F0: f64 = 110.0;
/// Peak-normalised RMS every source is scaled to.
const TARGET_RMS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Number of source classes (and model queries).
    pub classes: usize,
    /// Samples per clip.
    pub clip_len: usize,
    pub sample_rate: u32,
    /// Object feature width.
    pub object_dim: usize,
    /// Motion feature channels.
    pub motion_dim: usize,
    /// Motion feature frames.
    pub motion_frames: usize,
    /// Standard deviation of the per-example noise on object features.
    pub object_noise: f64,
    /// Overlapping fundamental ranges across classes.
    pub hard: bool,
    /// Seed of the class embeddings shared by every split.
    pub embedding_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            clip_len: 4096,
            sample_rate: SAMPLE_RATE,
            object_dim: 64,
            motion_dim: 32,
            motion_frames: 16,
            object_noise: 0.1,
            hard: false,
            embedding_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.clip_len == 0 || self.sample_rate == 0 {
            return Err(Error::contract("clip length and sample rate must be positive"));
        }
        if self.object_dim == 0 || self.motion_dim == 0 || self.motion_frames == 0 {
            return Err(Error::contract("visual feature dimensions must be positive"));
        }
        if self.motion_frames > self.clip_len {
            return Err(Error::contract("more motion frames than samples"));
        }
        if !(self.object_noise >= 0.0 && self.object_noise.is_finite()) {
            return Err(Error::contract("object noise must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn class(&self, id: usize) -> Result<SourceClass> {
        SourceClass::new(id, self.classes, self.hard)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HarmonicProfile {
    /// 1/h over all harmonics.
    Saw,
    /// 1/h over odd harmonics only.
    Odd,
    /// 1/h².
    Soft,
    /// Weak fundamental with a peak at the third harmonic.
    Formant,
}

impl HarmonicProfile {
    pub fn amplitude(self, h: usize) -> f64 {
        let hf = h as f64;
        match self {
            HarmonicProfile::Saw => 1.0 / hf,
            HarmonicProfile::Odd if h % 2 == 0 => 0.0,
            HarmonicProfile::Odd => 1.0 / hf,
            HarmonicProfile::Soft => 1.0 / (hf * hf),
            HarmonicProfile::Formant => (-(hf - 3.0).powi(2) / 4.0).exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Envelope {
    /// Short attack, then flat.
    Sustained,
    /// Exponential decay restarted twice per clip.
    Plucked,
    /// 6 Hz amplitude modulation.
    Tremolo,
    /// Linear rise from silence.
    Swell,
}

impl Envelope {
    /// Gain at `t` seconds into a clip lasting `dur` seconds.
    pub fn gain(self, t: f64, dur: f64) -> f64 {
        let attack = (t / 0.01).min(1.0);
        match self {
            Envelope::Sustained => attack,
            Envelope::Plucked => {
                let period = dur / 2.0;
                let local = t % period;
                (local / 0.003).min(1.0) * (-local / (0.25 * period)).exp()
            }
            Envelope::Tremolo => attack * (0.6 + 0.4 * (2.0 * PI * 6.0 * t).sin()),
            Envelope::Swell => t / dur,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceClass {
    pub id: usize,
    /// Fundamental frequency range in Hz, half-open.
    pub f0_range: (f64, f64),
    pub profile: HarmonicProfile,
    pub envelope: Envelope,
}

impl SourceClass {
    pub fn new(id: usize, classes: usize, hard: bool) -> Result<Self> {
        if id >= classes {
            return Err(Error::contract(format!("class id {id} outside [0, {classes})")));
        }
        // disjoint half-octave bands; hard mode widens each to an octave
        // starting at a quarter-octave spacing, so neighbours overlap
        let f0_range = if hard {
            let lo = BASE_F0 * 2f64.powf(id as f64 / 4.0);
            (lo, 2.0 * lo)
        } else {
            let lo = BASE_F0 * 2f64.powf(id as f64 / 2.0);
            (lo, lo * 2f64.sqrt())
        };
        let profiles = [HarmonicProfile::Saw, HarmonicProfile::Odd, HarmonicProfile::Soft, HarmonicProfile::Formant];
        let envelopes = [Envelope::Sustained, Envelope::Plucked, Envelope::Tremolo, Envelope::Swell];
        Ok(Self {
            id,
            f0_range,
            profile: profiles[id % 4],
            envelope: envelopes[(id + id / 4) % 4],
        })
    }

    /// Log-uniform draw from the class range.
    pub fn fundamental(&self, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = self.f0_range;
        lo * (hi / lo).powf(rng.gen::<f64>())
    }
}

/// One clip of `len` samples for `class`. Deterministic in `(class, seed)`.
pub fn sample_source(class: &SourceClass, len: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if len == 0 {
        return Err(Error::contract("source length must be positive"));
    }
    let f0 = class.fundamental(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let nyquist = sample_rate as f64 / 2.0;
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|h| (h, h as f64 * f0))
        .take_while(|&(_, f)| f < 0.9 * nyquist)
        .map(|(h, f)| (f, class.profile.amplitude(h), rng.gen_range(0.0..2.0 * PI)))
        .filter(|&(_, a, _)| a > 0.0)
        .collect();
    let rate = sample_rate as f64;
    let dur = len as f64 / rate;
    let mut samples: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / rate;
            let tone: f64 = harmonics.iter().map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum();
            class.envelope.gain(t, dur) * tone
        })
        .collect();
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let k = (TARGET_RMS / rms).min(1.0 / peak);
        samples.iter_mut().for_each(|v| *v *= k);
    }
    Waveform::new(samples, sample_rate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeature {
    /// Length `object_dim`.
    pub object: Vec<f64>,
    /// `motion_dim x motion_frames`, row-major.
    pub motion: Vec<f64>,
    pub motion_dim: usize,
    pub motion_frames: usize,
}

/// Unit-norm class embedding of width `dim`, one stream per `(salt, class)`.
fn class_embedding(cfg: &DataConfig, class: usize, salt: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.embedding_seed, salt), class as u64));
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// RMS of each of `frames` equal segments of the clip.
pub fn frame_rms(w: &Waveform, frames: usize) -> Vec<f64> {
    let s = w.samples();
    (0..frames)
        .map(|f| {
            let (a, b) = (f * s.len() / frames, ((f + 1) * s.len() / frames).max(f * s.len() / frames + 1));
            let seg = &s[a..b.min(s.len())];
            (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt()
        })
        .collect()
}

/// Object feature: class embedding plus seeded noise. Motion feature: a
/// second class embedding scaled by the source's frame-level RMS envelope.
pub fn make_visual(cfg: &DataConfig, class: &SourceClass, source: &Waveform, seed: u64) -> Result<VisualFeature> {
    cfg.validate()?;
    if class.id >= cfg.classes {
        return Err(Error::contract(format!("class id {} outside [0, {})", class.id, cfg.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object = class_embedding(cfg, class.id, 1, cfg.object_dim)
        .into_iter()
        .map(|v| v + cfg.object_noise * rng.sample::<f64, _>(StandardNormal) / (cfg.object_dim as f64).sqrt())
        .collect();
    let dir = class_embedding(cfg, class.id, 2, cfg.motion_dim);
    // scaled so a TARGET_RMS source gives unit-order entries
    let env: Vec<f64> = frame_rms(source, cfg.motion_frames).iter().map(|r| r / TARGET_RMS).collect();
    let motion = dir.iter().flat_map(|d| env.iter().map(move |e| d * e)).collect();
    Ok(VisualFeature {
        object,
        motion,
        motion_dim: cfg.motion_dim,
        motion_frames: cfg.motion_frames,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub seed: u64,
    pub labels: Vec<usize>,
    pub sources: Vec<Waveform>,
    pub visuals: Vec<VisualFeature>,
    pub mixture: Waveform,
}

/// `k` distinct classes drawn without replacement, one source each, summed.
pub fn sample_mixture(cfg: &DataConfig, k: usize, seed: u64) -> Result<MixtureExample> {
    cfg.validate()?;
    if k < 2 || k > cfg.classes {
        return Err(Error::contract(format!("K = {k} outside [2, {}]", cfg.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = index::sample(&mut rng, cfg.classes, k).into_vec();
    let mut sources = Vec::with_capacity(k);
    let mut visuals = Vec::with_capacity(k);
    for (i, &c) in labels.iter().enumerate() {
        let class = cfg.class(c)?;
        let s = sample_source(&class, cfg.clip_len, cfg.sample_rate, derive_seed(seed, 2 * i as u64 + 1))?;
        visuals.push(make_visual(cfg, &class, &s, derive_seed(seed, 2 * i as u64 + 2))?);
        sources.push(s);
    }
    let mixture = mix(&sources)?;
    Ok(MixtureExample {
        seed,
        labels,
        sources,
        visuals,
        mixture,
    })
}

/// A split is a list of example seeds derived from one base seed; examples
/// are regenerated on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub base_seed: u64,
    pub len: usize,
    pub k: usize,
}

impl Split {
    pub fn seed(&self, i: usize) -> u64 {
        derive_seed(self.base_seed, i as u64)
    }

    pub fn example(&self, cfg: &DataConfig, i: usize) -> Result<MixtureExample> {
        if i >= self.len {
            return Err(Error::contract(format!("example {i} outside split of {}", self.len)));
        }
        sample_mixture(cfg, self.k, self.seed(i))
    }

    /// Manifest records, in example order.
    pub fn manifest(&self, cfg: &DataConfig) -> Result<Vec<ManifestRecord>> {
        (0..self.len)
            .map(|i| {
                let ex = self.example(cfg, i)?;
                Ok(ManifestRecord {
                    seed: ex.seed,
                    k: self.k,
                    classes: ex.labels,
                    wavs: Vec::new(),
                })
            })
            .collect()
    }
}

/// One line of the dataset manifest. Fields serialize in declaration
/// order: `seed, k, classes, wavs`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub seed: u64,
    pub k: usize,
    pub classes: Vec<usize>,
    #[serde(default)]
    pub wavs: Vec<String>,
}

pub fn write_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("manifest records always serialize"));
        out.push('\n');
    }
    out
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1))))
        .collect()
}
