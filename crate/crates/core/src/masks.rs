//! Ratio masks and the L1 separation objective.

use crate::autodiff::{Graph, Var};
use crate::dsp::Magnitude;
use crate::error::{Error, Result};

pub const DEFAULT_FLOOR: f64 = 1e-8;
pub const DEFAULT_CAP: f64 = 1.0;
pub const MAX_CAP: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Predicted,
    GroundTruth,
}

/// Frequency-major mask grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
    pub kind: MaskKind,
}

impl MaskMap {
    pub fn new(bins: usize, frames: usize, values: Vec<f64>, kind: MaskKind) -> Result<Self> {
        if bins == 0 || frames == 0 || values.len() != bins * frames {
            return Err(Error::shape("mask", format!("{} values for {bins}x{frames}", values.len())));
        }
        let ok = match kind {
            MaskKind::Predicted => values.iter().all(|v| (0.0..=1.0).contains(v)),
            MaskKind::GroundTruth => values.iter().all(|v| v.is_finite() && *v >= 0.0),
        };
        if !ok {
            return Err(Error::Numeric(format!("{kind:?} mask has values out of range")));
        }
        Ok(Self { bins, frames, values, kind })
    }
}

/// `S_k / S_mix` where `S_mix > floor`, else 0; clipped to `[0, cap]`.
pub fn ground_truth_mask(source: &Magnitude, mixture: &Magnitude, floor: f64, cap: f64) -> Result<MaskMap> {
    if !(floor > 0.0) {
        return Err(Error::contract(format!("mask floor must be positive, got {floor}")));
    }
    if !(cap > 0.0 && cap <= MAX_CAP) {
        return Err(Error::contract(format!("mask cap {cap} outside (0, {MAX_CAP}]")));
    }
    if source.bins != mixture.bins || source.frames != mixture.frames || source.axis != mixture.axis {
        return Err(Error::shape(
            "ground_truth_mask",
            format!("source {}x{} vs mixture {}x{}", source.bins, source.frames, mixture.bins, mixture.frames),
        ));
    }
    let values = source
        .data
        .iter()
        .zip(&mixture.data)
        .map(|(&s, &m)| if m > floor { (s / m).clamp(0.0, cap) } else { 0.0 })
        .collect();
    MaskMap::new(source.bins, source.frames, values, MaskKind::GroundTruth)
}

/// Cellwise `S_mix ⊙ M`.
pub fn apply_mask(mixture: &Magnitude, mask: &MaskMap) -> Result<Magnitude> {
    if mixture.bins != mask.bins || mixture.frames != mask.frames {
        return Err(Error::shape(
            "apply_mask",
            format!("mixture {}x{} vs mask {}x{}", mixture.bins, mixture.frames, mask.bins, mask.frames),
        ));
    }
    let data = mixture.data.iter().zip(&mask.values).map(|(s, m)| s * m).collect();
    Magnitude::new(mixture.bins, mixture.frames, data, mixture.axis.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// `Σ_k ‖M_k − M_k^GT‖₁` with the per-source norm summed or averaged over
/// cells.
pub fn l1_loss(preds: &[MaskMap], gts: &[MaskMap], reduction: Reduction) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::contract(format!("{} predicted masks for {} targets", preds.len(), gts.len())));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(gts) {
        if p.values.len() != t.values.len() {
            return Err(Error::shape("l1_loss", format!("{} vs {} cells", p.values.len(), t.values.len())));
        }
        let s: f64 = p.values.iter().zip(&t.values).map(|(a, b)| (a - b).abs()).sum();
        total += match reduction {
            Reduction::Sum => s,
            Reduction::Mean => s / p.values.len() as f64,
        };
    }
    Ok(total)
}

/// Graph version of the objective for a batch of `examples` mixtures whose
/// masks are stacked as rows of `pred`/`gt` (`[R, 1, F, T]`): the mean over
/// cells of each row, summed over rows, divided by `examples`.
pub fn separation_loss(g: &mut Graph, pred: Var, gt: Var, examples: usize) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::contract(format!(
            "predicted masks {:?} vs targets {:?}",
            g.shape(pred),
            g.shape(gt)
        )));
    }
    if examples == 0 {
        return Err(Error::contract("loss over zero examples"));
    }
    let s = g.shape(pred).to_vec();
    let cells: usize = s[1..].iter().product();
    let d = g.sub(pred, gt)?;
    let a = g.abs(d)?;
    let total = g.sum(a)?;
    g.scale(total, 1.0 / (cells * examples) as f64)
}
