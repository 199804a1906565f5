//! Waveforms, short-time Fourier analysis/synthesis and log-frequency
//! resampling.
//!
//! Spectrograms are stored frequency-major: the value for bin `f` and frame
//! `t` lives at `f * frames + t`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate every clip is converted to on ingestion.
pub const SAMPLE_RATE: u32 = 11_025;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("waveform must have at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::contract("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("waveform sample {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len.max(1)],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * k).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Self {
        let mut s = self.samples.clone();
        s.resize(len.max(1), 0.0);
        Self {
            samples: s,
            sample_rate: self.sample_rate,
        }
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(Error::contract("target sample rate must be positive"));
        }
        if rate == self.sample_rate {
            return Ok(self.clone());
        }
        let ratio = self.sample_rate as f64 / rate as f64;
        let out_len = ((self.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                self.samples[lo] + frac * (self.samples[hi] - self.samples[lo])
            })
            .collect();
        Waveform::new(samples, rate)
    }
}

/// Elementwise sum of equal-length, equal-rate sources.
pub fn mix(sources: &[Waveform]) -> Result<Waveform> {
    if sources.len() < 2 {
        return Err(Error::contract(format!("mix needs at least 2 sources, got {}", sources.len())));
    }
    let (len, rate) = (sources[0].len(), sources[0].sample_rate);
    if let Some(s) = sources.iter().find(|s| s.len() != len || s.sample_rate != rate) {
        return Err(Error::contract(format!(
            "mix: source of {} samples at {} Hz does not match {len} samples at {rate} Hz",
            s.len(),
            s.sample_rate
        )));
    }
    let mut out = vec![0.0; len];
    for s in sources {
        out.iter_mut().zip(&s.samples).for_each(|(o, v)| *o += v);
    }
    Waveform::new(out, rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    /// Hann window length in samples.
    pub window_len: usize,
    pub hop: usize,
    /// When set, the signal is zero-padded symmetrically so the transform
    /// yields exactly this many frames.
    pub target_frames: Option<usize>,
}

impl StftParams {
    /// 1022-point window, hop 256, 256 frames: 512 x 256 linear grid for
    /// 65,536-sample clips.
    pub const FULL: StftParams = StftParams {
        window_len: 1022,
        hop: 256,
        target_frames: Some(256),
    };

    /// 254-point window, hop 64, 64 frames: 128 x 64 linear grid for
    /// 4,096-sample clips.
    pub const DESK: StftParams = StftParams {
        window_len: 254,
        hop: 64,
        target_frames: Some(64),
    };

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.hop == 0 || self.hop > self.window_len {
            return Err(Error::contract(format!(
                "need 0 < hop <= window_len, got hop {} window {}",
                self.hop, self.window_len
            )));
        }
        if self.target_frames == Some(0) {
            return Err(Error::contract("target frame count must be positive"));
        }
        Ok(())
    }

    /// Number of non-negative frequency bins.
    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Samples spanned by `frames` analysis frames.
    pub fn span(&self, frames: usize) -> usize {
        self.window_len + (frames - 1) * self.hop
    }

    pub fn window(&self) -> Vec<f64> {
        hann(self.window_len)
    }

    /// Largest relative deviation of the overlap-added window from its mean
    /// over one hop period in steady state. Zero for exact
    /// constant-overlap-add.
    pub fn cola_deviation(&self) -> f64 {
        let w = self.window();
        let periods = self.window_len.div_ceil(self.hop) + 2;
        let len = self.span(2 * periods);
        let mut acc = vec![0.0; len];
        for f in 0..2 * periods {
            for (j, v) in w.iter().enumerate() {
                acc[f * self.hop + j] += v;
            }
        }
        // steady state: a window's length away from both ends
        let mid = &acc[self.window_len..len - self.window_len];
        let mean = mid.iter().sum::<f64>() / mid.len() as f64;
        mid.iter().map(|v| (v - mean).abs() / mean).fold(0.0, f64::max)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Complex short-time spectrum on the linear frequency axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub params: StftParams,
    pub sample_rate: u32,
    pub bins: usize,
    pub frames: usize,
    /// Zeros prepended before analysis.
    pub pad_left: usize,
    /// Length of the analysed signal before padding.
    pub signal_len: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn magnitude(&self) -> Magnitude {
        Magnitude {
            bins: self.bins,
            frames: self.frames,
            data: self.data.iter().map(|c| c.norm()).collect(),
            axis: FreqAxis::Linear,
        }
    }

    /// Replaces magnitudes while keeping this spectrogram's phase. Cells
    /// with zero magnitude take phase zero.
    pub fn with_magnitude(&self, mag: &Magnitude) -> Result<Spectrogram> {
        if mag.axis != FreqAxis::Linear || mag.bins != self.bins || mag.frames != self.frames {
            return Err(Error::shape(
                "with_magnitude",
                format!(
                    "{}x{} {:?} magnitude for a {}x{} linear spectrogram",
                    mag.bins,
                    mag.frames,
                    mag.axis.kind(),
                    self.bins,
                    self.frames
                ),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&mag.data)
            .map(|(c, &m)| {
                let n = c.norm();
                if n > 0.0 {
                    c * (m / n)
                } else {
                    Complex64::new(m, 0.0)
                }
            })
            .collect();
        Ok(Spectrogram { data, ..self.clone() })
    }

    /// Scales each cell by a real linear-axis mask.
    pub fn apply_real_mask(&self, mask: &[f64]) -> Result<Spectrogram> {
        if mask.len() != self.data.len() {
            return Err(Error::shape("apply_real_mask", format!("{} mask values for {} cells", mask.len(), self.data.len())));
        }
        let data = self.data.iter().zip(mask).map(|(c, m)| c * m).collect();
        Ok(Spectrogram { data, ..self.clone() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FreqAxis {
    Linear,
    Log(Arc<LogGrid>),
}

impl FreqAxis {
    fn kind(&self) -> &'static str {
        match self {
            FreqAxis::Linear => "linear",
            FreqAxis::Log(_) => "log",
        }
    }
}

/// Non-negative magnitude grid, frequency-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Magnitude {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
    pub axis: FreqAxis,
}

impl Magnitude {
    pub fn new(bins: usize, frames: usize, data: Vec<f64>, axis: FreqAxis) -> Result<Self> {
        if bins == 0 || frames == 0 || data.len() != bins * frames {
            return Err(Error::shape("magnitude", format!("{} values for {bins}x{frames}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Numeric(format!("magnitude cell {i} is {}", data[i])));
        }
        Ok(Self { bins, frames, data, axis })
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.frames + frame]
    }
}

fn plan(n: usize, inverse: bool) -> Arc<dyn rustfft::Fft<f64>> {
    let mut p = FftPlanner::new();
    if inverse {
        p.plan_fft_inverse(n)
    } else {
        p.plan_fft_forward(n)
    }
}

pub fn stft(w: &Waveform, p: &StftParams) -> Result<Spectrogram> {
    p.validate()?;
    let n = p.window_len;
    let (pad_left, padded_len) = match p.target_frames {
        Some(t) => {
            let need = p.span(t);
            if w.len() > need {
                return Err(Error::contract(format!(
                    "{} samples exceed the {need} spanned by {t} frames",
                    w.len()
                )));
            }
            let pad = need - w.len();
            (pad / 2, need)
        }
        None => {
            if w.len() < n {
                return Err(Error::contract(format!("{} samples is shorter than the {n}-sample window", w.len())));
            }
            (0, w.len())
        }
    };
    let frames = (padded_len - n) / p.hop + 1;
    let bins = p.bins();
    let window = p.window();
    let fft = plan(n, false);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    let s = w.samples();
    for t in 0..frames {
        let start = t * p.hop;
        for (j, b) in buf.iter_mut().enumerate() {
            let pos = start + j;
            let x = if pos >= pad_left && pos - pad_left < s.len() {
                s[pos - pad_left]
            } else {
                0.0
            };
            *b = Complex64::new(x * window[j], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for f in 0..bins {
            data[f * frames + t] = buf[f];
        }
    }
    Ok(Spectrogram {
        params: *p,
        sample_rate: w.sample_rate(),
        bins,
        frames,
        pad_left,
        signal_len: w.len(),
        data,
    })
}

/// Weighted overlap-add inverse: each frame is windowed again and the sum
/// is divided by the overlapped squared window, which inverts `stft`
/// exactly wherever that sum is non-zero.
pub fn istft(s: &Spectrogram, p: &StftParams) -> Result<Waveform> {
    if s.params != *p {
        return Err(Error::contract(format!(
            "spectrogram was made with {:?}, asked to invert with {:?}",
            s.params, p
        )));
    }
    let n = p.window_len;
    let window = p.window();
    let fft = plan(n, true);
    let len = p.span(s.frames);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..s.frames {
        for f in 0..s.bins {
            buf[f] = s.at(f, t);
        }
        for f in s.bins..n {
            buf[f] = s.at(n - f, t).conj();
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * p.hop;
        for j in 0..n {
            out[start + j] += buf[j].re / n as f64 * window[j];
            norm[start + j] += window[j] * window[j];
        }
    }
    let samples: Vec<f64> = (s.pad_left..s.pad_left + s.signal_len)
        .map(|i| {
            if i < len && norm[i] > 1e-10 {
                out[i] / norm[i]
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, s.sample_rate)
}

/// Mapping between a linear frequency axis of `source_bins` bins and a
/// log-spaced axis of `target_bins` bins spanning linear bin 1 (the lowest
/// non-zero frequency) to the Nyquist bin.
#[derive(Clone, Debug, PartialEq)]
pub struct LogGrid {
    pub source_bins: usize,
    pub target_bins: usize,
    /// Fractional linear-bin position of each log bin.
    pub positions: Vec<f64>,
}

impl LogGrid {
    pub fn new(source_bins: usize, target_bins: usize) -> Result<Self> {
        if target_bins < 2 {
            return Err(Error::contract(format!("log grid needs at least 2 bins, got {target_bins}")));
        }
        if source_bins < 3 || target_bins > source_bins {
            return Err(Error::contract(format!(
                "cannot resample {source_bins} linear bins onto {target_bins} log bins"
            )));
        }
        let top = (source_bins - 1) as f64;
        let positions = (0..target_bins)
            .map(|j| {
                if j == target_bins - 1 {
                    top
                } else {
                    top.powf(j as f64 / (target_bins - 1) as f64)
                }
            })
            .collect();
        Ok(Self {
            source_bins,
            target_bins,
            positions,
        })
    }

    /// Center frequency of log bin `j` in Hz for the given analysis setup.
    pub fn center_hz(&self, j: usize, sample_rate: u32, window_len: usize) -> f64 {
        self.positions[j] * sample_rate as f64 / window_len as f64
    }

    /// Interpolates a frequency-major linear grid onto the log axis.
    pub fn forward(&self, linear: &[f64], frames: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.target_bins * frames];
        for (j, &pos) in self.positions.iter().enumerate() {
            let lo = (pos.floor() as usize).min(self.source_bins - 1);
            let hi = (lo + 1).min(self.source_bins - 1);
            let w = pos - lo as f64;
            for t in 0..frames {
                let a = linear[lo * frames + t];
                let b = linear[hi * frames + t];
                out[j * frames + t] = a + w * (b - a);
            }
        }
        out
    }

    /// Maps a log-axis grid (typically a mask) back to linear bins by
    /// interpolating in log-frequency. Bin 0 takes the lowest log bin.
    pub fn inverse(&self, log: &[f64], frames: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.source_bins * frames];
        let scale = (self.target_bins - 1) as f64 / ((self.source_bins - 1) as f64).ln();
        for i in 0..self.source_bins {
            let q = if i <= 1 { 0.0 } else { (i as f64).ln() * scale };
            let lo = (q.floor() as usize).min(self.target_bins - 1);
            let hi = (lo + 1).min(self.target_bins - 1);
            let w = q - lo as f64;
            for t in 0..frames {
                let a = log[lo * frames + t];
                let b = log[hi * frames + t];
                out[i * frames + t] = a + w * (b - a);
            }
        }
        out
    }
}

/// Resamples a linear-axis magnitude onto `target_bins` log-spaced bins by
/// linear interpolation between neighbouring linear bins.
pub fn log_resample(s: &Magnitude, target_bins: usize) -> Result<Magnitude> {
    if s.axis != FreqAxis::Linear {
        return Err(Error::contract("log_resample expects a linear-axis magnitude"));
    }
    let grid = LogGrid::new(s.bins, target_bins)?;
    let data = grid.forward(&s.data, s.frames);
    Ok(Magnitude {
        bins: target_bins,
        frames: s.frames,
        data,
        axis: FreqAxis::Log(Arc::new(grid)),
    })
}

/// Reads 16-bit PCM mono WAV and converts it to [`SAMPLE_RATE`].
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::contract(format!(
            "{}: expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)?.resample(SAMPLE_RATE)
}

/// Writes 16-bit PCM mono WAV at the waveform's own rate; samples are
/// clipped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
