//! Bottleneck fusion of object features with audio features.
//!
//! Multiplicative fusion projects the object vector to the bottleneck width
//! and scales every position by it. The gated variant blends that product
//! with the untouched audio feature, `σ·F_av + (1 − σ)·F_mid`, where
//! `σ = sigmoid(conv1x1(F_av) + conv1x1(F_mid))` is a full per-channel,
//! per-position field.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Which bottleneck transform the model uses; the four ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    /// No fusion at the bottleneck.
    #[serde(rename = "baseline")]
    Baseline,
    /// Multiplicative fusion only.
    #[serde(rename = "mul")]
    Mul,
    /// Gated fusion.
    #[serde(rename = "dgfm")]
    Dgfm,
    /// Gated fusion plus decoder attention.
    #[serde(rename = "dgfm+attention")]
    DgfmAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::Baseline, FusionMode::Mul, FusionMode::Dgfm, FusionMode::DgfmAttention];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Baseline => "baseline",
            FusionMode::Mul => "mul",
            FusionMode::Dgfm => "dgfm",
            FusionMode::DgfmAttention => "dgfm+attention",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            FusionMode::Baseline => "Baseline",
            FusionMode::Mul => "+Mul",
            FusionMode::Dgfm => "+DGFM",
            FusionMode::DgfmAttention => "DGFNet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown fusion mode `{s}` (expected baseline, mul, dgfm or dgfm+attention)")))
    }

    pub fn fuses(self) -> bool {
        self != FusionMode::Baseline
    }

    pub fn gated(self) -> bool {
        matches!(self, FusionMode::Dgfm | FusionMode::DgfmAttention)
    }

    pub fn attention(self) -> bool {
        self == FusionMode::DgfmAttention
    }
}

/// Gate coefficients of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GateField {
    /// `[bottleneck, h, w]`.
    pub sigma: Tensor,
    pub mean_sigma: f64,
}

impl GateField {
    pub fn new(sigma: Tensor) -> Result<Self> {
        if let Some(v) = sigma.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Numeric(format!("gate coefficient {v} outside (0, 1)")));
        }
        let mean_sigma = sigma.mean();
        Ok(Self { sigma, mean_sigma })
    }

    /// Splits a batched `[R, C, h, w]` gate tensor into per-row fields.
    pub fn split_rows(sigma: &Tensor) -> Result<Vec<GateField>> {
        let s = sigma.shape();
        if s.len() != 4 {
            return Err(Error::shape("gate_field", format!("expected [R, C, h, w], got {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        sigma
            .data()
            .chunks(inner)
            .map(|c| GateField::new(Tensor::new(&s[1..], c.to_vec())?))
            .collect()
    }

    /// Channel-averaged `h x w` map.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let s = self.sigma.shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let mut out = vec![0.0; hw];
        for ch in self.sigma.data().chunks(hw) {
            out.iter_mut().zip(ch).for_each(|(o, v)| *o += v / c as f64);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub object_dim: usize,
    pub channels: usize,
    project: Linear,
    /// `(on F_av, on F_mid)`; absent for the multiplicative-only arm.
    gate: Option<(Conv, Conv)>,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, object_dim: usize, channels: usize, gated: bool) -> Result<Self> {
        let gate = if gated {
            Some((
                Conv::new(store, &format!("{name}.gate_av"), channels, channels, 1, 1, true)?,
                Conv::new(store, &format!("{name}.gate_mid"), channels, channels, 1, 1, true)?,
            ))
        } else {
            None
        };
        Ok(Self {
            object_dim,
            channels,
            project: Linear::new(store, &format!("{name}.project"), object_dim, channels, true)?,
            gate,
        })
    }

    /// Object features `[R, object_dim]` → `[R, bottleneck]`.
    pub fn project(&self, cx: &mut Ctx, object: Var) -> Result<Var> {
        let s = cx.g.shape(object);
        if s.len() != 2 || s[1] != self.object_dim {
            return Err(Error::contract(format!("object features must be [R, {}], got {s:?}", self.object_dim)));
        }
        self.project.forward(cx, object)
    }

    /// `F_av = F_mid ⊙ tile(project(F_O))`.
    pub fn fuse_multiplicative(&self, cx: &mut Ctx, object: Var, mid: Var) -> Result<Var> {
        let p = self.project(cx, object)?;
        multiply_projected(cx.g, p, mid)
    }

    /// The `+Mul` ablation arm: the multiplicative product is the
    /// bottleneck replacement.
    pub fn fuse_mul_only(&self, cx: &mut Ctx, object: Var, mid: Var) -> Result<Var> {
        self.fuse_multiplicative(cx, object, mid)
    }

    /// `σ = sigmoid(conv1x1(F_av) + conv1x1(F_mid))`.
    pub fn gate(&self, cx: &mut Ctx, f_av: Var, mid: Var) -> Result<Var> {
        if cx.g.shape(f_av) != cx.g.shape(mid) {
            return Err(Error::contract(format!(
                "gate inputs differ in shape: {:?} vs {:?}",
                cx.g.shape(f_av),
                cx.g.shape(mid)
            )));
        }
        let (on_av, on_mid) = self
            .gate
            .as_ref()
            .ok_or_else(|| Error::contract("this fusion was built without a gate"))?;
        let a = on_av.forward(cx, f_av)?;
        let b = on_mid.forward(cx, mid)?;
        let z = cx.g.add(a, b)?;
        cx.g.sigmoid(z)
    }

    /// Returns `(F_d, σ)`.
    pub fn dgfm(&self, cx: &mut Ctx, f_av: Var, mid: Var) -> Result<(Var, Var)> {
        let sigma = self.gate(cx, f_av, mid)?;
        let fd = blend(cx.g, f_av, mid, sigma)?;
        Ok((fd, sigma))
    }
}

/// `mid ⊙ p` with `p: [R, C]` tiled over `mid: [R, C, h, w]`.
pub fn multiply_projected(g: &mut Graph, projected: Var, mid: Var) -> Result<Var> {
    let (ps, ms) = (g.shape(projected).to_vec(), g.shape(mid).to_vec());
    if ps.len() != 2 || ms.len() != 4 || ps[..] != ms[..2] {
        return Err(Error::contract(format!("projected visual {ps:?} does not match bottleneck {ms:?}")));
    }
    let p = g.reshape(projected, &[ps[0], ps[1], 1, 1])?;
    g.mul_bc(mid, p)
}

/// `σ·f_av + (1 − σ)·mid`, computed term by term.
pub fn blend(g: &mut Graph, f_av: Var, mid: Var, sigma: Var) -> Result<Var> {
    if g.shape(f_av) != g.shape(mid) || g.shape(sigma) != g.shape(mid) {
        return Err(Error::contract(format!(
            "blend needs equal shapes, got F_av {:?}, F_mid {:?}, σ {:?}",
            g.shape(f_av),
            g.shape(mid),
            g.shape(sigma)
        )));
    }
    let open = g.mul(sigma, f_av)?;
    let rest = g.affine(sigma, -1.0, 1.0)?;
    let closed = g.mul(rest, mid)?;
    g.add(open, closed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(FusionMode::parse(m.name()).unwrap(), m);
        }
        assert!(FusionMode::parse("concat").is_err());
        assert_eq!(serde_json::to_string(&FusionMode::DgfmAttention).unwrap(), "\"dgfm+attention\"");
    }

    #[test]
    fn gate_field_rejects_closed_values() {
        assert!(GateField::new(Tensor::new(&[1, 1, 2], vec![0.2, 1.0]).unwrap()).is_err());
        let f = GateField::new(Tensor::new(&[2, 1, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap()).unwrap();
        assert!((f.mean_sigma - 0.5).abs() < 1e-15);
        for (got, want) in f.spatial_mean().into_iter().zip([0.4, 0.6]) {
            assert!((got - want).abs() < 1e-15);
        }
    }
}
