//! Source-separation scores by least-squares projection.
//!
//! An estimate of source `j` is split as
//! `ŝ = s_target + e_interf + e_artif`, where `s_target` is its projection
//! onto (delayed copies of) reference `j`, `s_target + e_interf` its
//! projection onto all references, and `e_artif` the rest. With one tap the
//! projections are onto the references themselves; with `L` taps onto
//! `L` delayed copies, which allows a time-invariant distortion filter.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Every ratio is clipped to `±DB_CAP`.
pub const DB_CAP: f64 = 80.0;

/// Filter length of the distortion-tolerant variant.
pub const LONG_TAPS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SourceScore {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

impl SourceScore {
    pub fn mean(scores: &[SourceScore]) -> Option<SourceScore> {
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        Some(SourceScore {
            sdr: scores.iter().map(|s| s.sdr).sum::<f64>() / n,
            sir: scores.iter().map(|s| s.sir).sum::<f64>() / n,
            sar: scores.iter().map(|s| s.sar).sum::<f64>() / n,
        })
    }
}

/// The three error components of one estimate, each of length
/// `len + taps − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interf: Vec<f64>,
    pub artif: Vec<f64>,
}

impl Decomposition {
    pub fn score(&self) -> SourceScore {
        let t = energy(&self.target);
        let i = energy(&self.interf);
        let a = energy(&self.artif);
        let ia: f64 = self.interf.iter().zip(&self.artif).map(|(x, y)| (x + y) * (x + y)).sum();
        let ti: f64 = self.target.iter().zip(&self.interf).map(|(x, y)| (x + y) * (x + y)).sum();
        SourceScore {
            sdr: ratio_db(t, ia),
            sir: ratio_db(t, i),
            sar: ratio_db(ti, a),
        }
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10·log10(num/den)` clipped to the cap; an exact zero denominator hits
/// the upper cap and a zero numerator the lower one.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -DB_CAP;
    }
    if den <= 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

/// Correlation `Σ_u a(u)·b(u + d)` for one lag.
fn xcorr(a: &[f64], b: &[f64], d: isize) -> f64 {
    let n = a.len() as isize;
    let (lo, hi) = ((-d).max(0), (n - d).min(n));
    (lo..hi).map(|u| a[u as usize] * b[(u + d) as usize]).sum()
}

/// Least-squares projection of `x` (zero-padded by `taps − 1`) onto the
/// span of `taps` delayed copies of each of `refs`.
fn project(x: &[f64], refs: &[&[f64]], taps: usize) -> Result<Vec<f64>> {
    let n = x.len();
    let k = refs.len();
    let dim = k * taps;
    // lagged cross-correlations of every reference pair
    let mut corr = vec![vec![vec![0.0; 2 * taps - 1]; k]; k];
    for a in 0..k {
        for b in a..k {
            for (i, d) in (-(taps as isize - 1)..taps as isize).enumerate() {
                let c = xcorr(refs[a], refs[b], d);
                corr[a][b][i] = c;
                if a != b {
                    corr[b][a][2 * taps - 2 - i] = c;
                }
            }
        }
    }
    let gram = DMatrix::from_fn(dim, dim, |r, c| {
        let (ka, la) = (r / taps, r % taps);
        let (kb, lb) = (c / taps, c % taps);
        // Σ s_a(u) s_b(u + la − lb)
        corr[ka][kb][(la as isize - lb as isize + taps as isize - 1) as usize]
    });
    let rhs = DVector::from_fn(dim, |r, _| xcorr(refs[r / taps], x, (r % taps) as isize));
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::contract("references are linearly dependent"))?;
    let coef = chol.solve(&rhs);
    let mut out = vec![0.0; n + taps - 1];
    for (r, c) in coef.iter().enumerate() {
        let (kk, l) = (r / taps, r % taps);
        for (t, s) in refs[kk].iter().enumerate() {
            out[t + l] += c * s;
        }
    }
    Ok(out)
}

fn check_inputs(estimates: &[Waveform], references: &[Waveform]) -> Result<usize> {
    if references.is_empty() || estimates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    let n = references[0].len();
    if n == 0 || estimates.iter().chain(references).any(|w| w.len() != n) {
        return Err(Error::contract("estimates and references must share one nonzero length"));
    }
    for (j, r) in references.iter().enumerate() {
        if r.energy() <= 1e-10 * n as f64 {
            return Err(Error::contract(format!("reference {j} is numerically silent")));
        }
    }
    Ok(n)
}

/// Decomposition of one estimate against reference `j` of `references`.
pub fn decompose(estimate: &[f64], references: &[&[f64]], j: usize, taps: usize) -> Result<Decomposition> {
    if taps == 0 || j >= references.len() {
        return Err(Error::contract(format!("bad target {j} or filter length {taps}")));
    }
    let target = project(estimate, &references[j..=j], taps)?;
    let all = project(estimate, references, taps)?;
    let mut padded = estimate.to_vec();
    padded.resize(estimate.len() + taps - 1, 0.0);
    let interf = all.iter().zip(&target).map(|(a, t)| a - t).collect();
    let artif = padded.iter().zip(&all).map(|(e, a)| e - a).collect();
    Ok(Decomposition { target, interf, artif })
}

/// Scores estimate `j` against reference `j` for every `j`.
pub fn bss_eval(estimates: &[Waveform], references: &[Waveform], taps: usize) -> Result<Vec<SourceScore>> {
    check_inputs(estimates, references)?;
    let refs: Vec<&[f64]> = references.iter().map(|w| w.samples()).collect();
    estimates
        .iter()
        .enumerate()
        .map(|(j, e)| Ok(decompose(e.samples(), &refs, j, taps)?.score()))
        .collect()
}

/// The unprocessed mixture used as the estimate of every source.
pub fn mixture_baseline(mixture: &Waveform, references: &[Waveform], taps: usize) -> Result<Vec<SourceScore>> {
    let estimates = vec![mixture.clone(); references.len()];
    bss_eval(&estimates, references, taps)
}
