//! Viridis PNG rendering of 2-D fields.

use std::path::Path;

use dgfnet_core::dsp::{stft, StftParams, Waveform};
use image::{ImageBuffer, Rgb};

/// Dynamic range shown in spectrogram images.
const SPEC_RANGE_DB: f64 = 80.0;

/// Writes a `rows x cols` row-major field as a PNG with row 0 at the
/// bottom, each cell drawn as a `scale x scale` block. Values are mapped
/// linearly from `[lo, hi]` onto the colormap.
pub fn field_png(path: &Path, values: &[f64], rows: usize, cols: usize, lo: f64, hi: f64, scale: u32) -> anyhow::Result<()> {
    anyhow::ensure!(values.len() == rows * cols, "field of {} values is not {rows} x {cols}", values.len());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (cols as u32 * scale, rows as u32 * scale);
    let img = ImageBuffer::from_fn(w, h, |x, y| {
        let r = rows - 1 - (y / scale) as usize;
        let c = (x / scale) as usize;
        let t = ((values[r * cols + c] - lo) / span).clamp(0.0, 1.0);
        let col = colorous::VIRIDIS.eval_continuous(t);
        Rgb([col.r, col.g, col.b])
    });
    img.save(path)?;
    Ok(())
}

/// Log-magnitude spectrogram of `w` on the linear frequency axis.
pub fn spectrogram_png(path: &Path, w: &Waveform, params: &StftParams, scale: u32) -> anyhow::Result<()> {
    let mag = stft(w, params)?.magnitude();
    let db: Vec<f64> = mag.data.iter().map(|m| 20.0 * (m + 1e-10).log10()).collect();
    let hi = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    field_png(path, &db, mag.bins, mag.frames, hi - SPEC_RANGE_DB, hi, scale)
}
