//! U-Net audio branch with grouped multi-scale attention after each decoder
//! upsampling stage.
//!
//! ```text
//! input [B,1,F,T]
//!   stem   conv3x3 → BN → ReLU                       e0 [c0, F, T]
//!   down_l conv3x3/2 → BN → ReLU   (l = 1..depth)    e_l [c_l, F/2^l, T/2^l]
//!   bottleneck = e_depth [bottleneck, F/2^depth, T/2^depth] → hook → z
//!   up_l   ×2 nearest → conv3x3 → BN → ReLU → attention → concat e_{l-1}
//!   head   conv3x3                                   F_a [C'_A, F, T]
//! ```
//!
//! Attention block on `[B, C, H, W]` with `G` groups (`x` viewed as
//! `[B·G, C/G, H, W]`):
//!
//! ```text
//!   xh = mean_W(x), xw = mean_H(x)
//!   [ah; aw] = conv1x1([xh; xw])
//!   x1 = groupnorm(x · σ(ah) · σ(aw))            1x1 branch
//!   x2 = relu(bn(conv3x3(x)))                    3x3 branch
//!   w  = softmax(pool(x1)) · x2 + softmax(pool(x2)) · x1   (per position)
//!   out = x · σ(w)
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnRelu, Ctx};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Bottleneck channel count.
    pub bottleneck_channels: usize,
    /// Output width C'_A.
    pub final_channels: usize,
    pub attention: bool,
    /// Channel groups of the attention block.
    pub attention_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            bottleneck_channels: 32,
            final_channels: 16,
            attention: true,
            attention_groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::contract(format!("U-Net depth must be at least 2, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.bottleneck_channels == 0 || self.final_channels == 0 {
            return Err(Error::contract("U-Net channel counts must be positive"));
        }
        if self.attention {
            for l in 0..self.depth {
                let c = self.channels(l);
                if self.attention_groups == 0 || c % self.attention_groups != 0 {
                    return Err(Error::contract(format!(
                        "attention groups {} do not divide the {c} channels of level {l}",
                        self.attention_groups
                    )));
                }
            }
        }
        Ok(())
    }

    /// Channel count of encoder level `l` (0 = stem, `depth` = bottleneck).
    pub fn channels(&self, l: usize) -> usize {
        if l == self.depth {
            self.bottleneck_channels
        } else {
            self.base_channels << l
        }
    }
}

#[derive(Clone, Debug)]
pub struct AudioAttention {
    name: String,
    groups: usize,
    channels: usize,
    directional: Conv,
    local: ConvBnRelu,
}

impl AudioAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::contract(format!("{groups} groups do not divide {channels} channels")));
        }
        let cg = channels / groups;
        store.add_param(&format!("{name}.gn.gamma"), Tensor::ones(&[1, cg, 1, 1]))?;
        store.add_param(&format!("{name}.gn.beta"), Tensor::zeros(&[1, cg, 1, 1]))?;
        Ok(Self {
            name: name.to_string(),
            groups,
            channels,
            directional: Conv::new(store, &format!("{name}.directional"), cg, cg, 1, 1, true)?,
            local: ConvBnRelu::new(store, &format!("{name}.local"), cg, cg, 3, 1)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::contract(format!("`{}` expects [B, {}, H, W], got {s:?}", self.name, self.channels)));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let (bg, cg) = (b * self.groups, self.channels / self.groups);
        let g = &mut *cx.g;
        let gx = g.reshape(x, &[bg, cg, h, w])?;

        // 1x1 branch: directional pooling, shared 1x1 conv, gates, group norm
        let xh = g.mean_axes(gx, &[3], true)?; // [bg, cg, h, 1]
        let xw = g.mean_axes(gx, &[2], true)?; // [bg, cg, 1, w]
        let xw = g.permute(xw, &[0, 1, 3, 2])?; // [bg, cg, w, 1]
        let cat = g.concat(&[xh, xw], 2)?;
        let hw = self.directional.forward(cx, cat)?;
        let g = &mut *cx.g;
        let ah = g.slice(hw, 2, 0, h)?;
        let aw = g.slice(hw, 2, h, w)?;
        let ah = g.sigmoid(ah)?;
        let aw = g.sigmoid(aw)?;
        let aw = g.permute(aw, &[0, 1, 3, 2])?; // [bg, cg, 1, w]
        let gated = g.mul_bc(gx, ah)?;
        let gated = g.mul_bc(gated, aw)?;
        let normed = g.norm_trailing(gated, 2, GN_EPS)?;
        let gamma = g.param(cx.store, &format!("{}.gn.gamma", self.name))?;
        let beta = g.param(cx.store, &format!("{}.gn.beta", self.name))?;
        let x1 = g.mul_bc(normed, gamma)?;
        let x1 = g.add_bc(x1, beta)?;

        // 3x3 branch
        let x2 = self.local.forward(cx, gx)?;

        // cross-branch aggregation
        let g = &mut *cx.g;
        let p1 = g.mean_axes(x1, &[2, 3], false)?; // [bg, cg]
        let p2 = g.mean_axes(x2, &[2, 3], false)?;
        let p1 = g.reshape(p1, &[bg, 1, cg])?;
        let p2 = g.reshape(p2, &[bg, 1, cg])?;
        let s1 = g.softmax(p1)?;
        let s2 = g.softmax(p2)?;
        let f1 = g.reshape(x1, &[bg, cg, h * w])?;
        let f2 = g.reshape(x2, &[bg, cg, h * w])?;
        let a = g.matmul(s1, f2)?;
        let c = g.matmul(s2, f1)?;
        let logits = g.add(a, c)?;
        let logits = g.reshape(logits, &[bg, 1, h, w])?;
        let gate = g.sigmoid(logits)?;
        let out = g.mul_bc(gx, gate)?;
        g.reshape(out, &[b, self.channels, h, w])
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    conv: ConvBnRelu,
    attention: Option<AudioAttention>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    stem: ConvBnRelu,
    down: Vec<ConvBnRelu>,
    /// `up[l]` produces level `l` features from level `l + 1`.
    up: Vec<UpStage>,
    head: Conv,
}

/// Encoder activations: `skips[l]` is level `l` (`skips[0]` = stem).
#[derive(Clone, Debug)]
pub struct Encoded {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

impl UNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBnRelu::new(store, &format!("{name}.stem"), 1, cfg.channels(0), 3, 1)?;
        let down = (1..=cfg.depth)
            .map(|l| ConvBnRelu::new(store, &format!("{name}.down{l}"), cfg.channels(l - 1), cfg.channels(l), 3, 2))
            .collect::<Result<Vec<_>>>()?;
        let mut up = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            // input to up[l]: the bottleneck for the deepest stage, else the
            // concatenation produced by up[l + 1]
            let c_in = if l + 1 == cfg.depth {
                cfg.channels(cfg.depth)
            } else {
                2 * cfg.channels(l + 1)
            };
            let c = cfg.channels(l);
            let conv = ConvBnRelu::new(store, &format!("{name}.up{l}"), c_in, c, 3, 1)?;
            let attention = if cfg.attention {
                Some(AudioAttention::new(store, &format!("{name}.att{l}"), c, cfg.attention_groups)?)
            } else {
                None
            };
            up.push(UpStage { conv, attention });
        }
        let head = Conv::new(store, &format!("{name}.head"), 2 * cfg.channels(0), cfg.final_channels, 3, 1, true)?;
        Ok(Self { cfg, stem, down, up, head })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = 1usize << self.cfg.depth;
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::contract(format!("U-Net input must be [B, 1, F, T], got {shape:?}")));
        }
        if shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::contract(format!(
                "spectrogram {}x{} is not divisible by 2^{} = {m}",
                shape[2], shape[3], self.cfg.depth
            )));
        }
        Ok(())
    }

    pub fn encode(&self, cx: &mut Ctx, x: Var) -> Result<Encoded> {
        self.check_input(cx.g.shape(x))?;
        let mut skips = vec![self.stem.forward(cx, x)?];
        for d in &self.down {
            let next = d.forward(cx, *skips.last().unwrap())?;
            skips.push(next);
        }
        let bottleneck = skips.pop().unwrap();
        Ok(Encoded { skips, bottleneck })
    }

    /// Decodes `z` (bottleneck-shaped, possibly with more rows than the
    /// encoded batch). Row `i` of `z` uses the skips of encoded example
    /// `rows[i]`.
    pub fn decode(&self, cx: &mut Ctx, enc: &Encoded, z: Var, rows: &[usize]) -> Result<Var> {
        let zs = cx.g.shape(z).to_vec();
        let bs = cx.g.shape(enc.bottleneck).to_vec();
        if zs.len() != 4 || zs[1..] != bs[1..] || zs[0] != rows.len() {
            return Err(Error::contract(format!(
                "bottleneck replacement {zs:?} does not match {bs:?} with {} rows",
                rows.len()
            )));
        }
        let identity = rows.len() == bs[0] && rows.iter().enumerate().all(|(i, &r)| i == r);
        let mut h = z;
        for l in (0..self.cfg.depth).rev() {
            let stage = &self.up[l];
            let u = cx.g.upsample2x(h)?;
            let mut y = stage.conv.forward(cx, u)?;
            if let Some(att) = &stage.attention {
                y = att.forward(cx, y)?;
            }
            let skip = if identity {
                enc.skips[l]
            } else {
                cx.g.select_rows(enc.skips[l], rows)?
            };
            h = cx.g.concat(&[y, skip], 1)?;
        }
        self.head.forward(cx, h)
    }

    /// Full pass with a bottleneck transform. Returns the bottleneck before
    /// the hook and the final features after it.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        x: Var,
        hook: impl FnOnce(&mut Ctx, Var) -> Result<Var>,
    ) -> Result<(Var, Var)> {
        let enc = self.encode(cx, x)?;
        let z = hook(cx, enc.bottleneck)?;
        if cx.g.shape(z) != cx.g.shape(enc.bottleneck) {
            return Err(Error::contract(format!(
                "bottleneck hook changed shape {:?} to {:?}",
                cx.g.shape(enc.bottleneck),
                cx.g.shape(z)
            )));
        }
        let rows: Vec<usize> = (0..cx.g.shape(x)[0]).collect();
        let fa = self.decode(cx, &enc, z, &rows)?;
        Ok((enc.bottleneck, fa))
    }
}
