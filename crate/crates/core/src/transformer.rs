//! Query decoder: visual naming, motion cross-attention, stacked
//! audio-visual decoder layers and the mask-embedding head.
//!
//! Every source is decoded independently. Row `r` of a batch carries a full
//! set of `N` class queries, of which only the column of its own class has
//! the object feature added.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Token width.
    pub width: usize,
    pub heads: usize,
    /// Number of audio-visual decoder layers.
    pub layers: usize,
    /// Hidden width of feed-forward sublayers, as a multiple of `width`.
    pub ffn_mult: usize,
    /// Add fixed 2-D sinusoidal encodings to the flattened audio tokens.
    pub positional: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            layers: 3,
            ffn_mult: 2,
            positional: false,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::contract(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::contract("decoder needs at least one layer and a positive FFN width"));
        }
        if self.positional && self.width % 4 != 0 {
            return Err(Error::contract("2-D positional encoding needs width divisible by 4"));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Clone, Debug)]
pub struct Attention {
    heads: usize,
    width: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            heads,
            width,
            q: Linear::new(store, &format!("{name}.q"), width, width, true)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, width, true)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, width, true)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, true)?,
        })
    }

    /// `query: [R, Lq, width]`, `kv: [R, Lk, kv_dim]`. Returns the output
    /// `[R, Lq, width]` and the weights `[R·heads, Lq, Lk]`.
    pub fn forward(&self, cx: &mut Ctx, query: Var, kv: Var) -> Result<(Var, Var)> {
        let (qs, ks) = (cx.g.shape(query).to_vec(), cx.g.shape(kv).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(Error::contract(format!("attention over {qs:?} and {ks:?}")));
        }
        let (r, lq, lk, h) = (qs[0], qs[1], ks[1], self.heads);
        let dh = self.width / h;
        let q = self.q.forward(cx, query)?;
        let k = self.k.forward(cx, kv)?;
        let v = self.v.forward(cx, kv)?;
        let g = &mut *cx.g;
        let split = |g: &mut crate::Graph, x: Var, len: usize, perm: &[usize], out: &[usize]| -> Result<Var> {
            let x = g.reshape(x, &[r, len, h, dh])?;
            let x = g.permute(x, perm)?;
            g.reshape(x, out)
        };
        let q = split(g, q, lq, &[0, 2, 1, 3], &[r * h, lq, dh])?;
        let kt = split(g, k, lk, &[0, 2, 3, 1], &[r * h, dh, lk])?;
        let v = split(g, v, lk, &[0, 2, 1, 3], &[r * h, lk, dh])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        let out = g.matmul(weights, v)?;
        let out = g.reshape(out, &[r, h, lq, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[r, lq, self.width])?;
        Ok((self.o.forward(cx, out)?, weights))
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    name: String,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        store.add_param(&format!("{name}.gamma"), Tensor::ones(&[width]))?;
        store.add_param(&format!("{name}.beta"), Tensor::zeros(&[width]))?;
        Ok(Self { name: name.to_string() })
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = cx.g.norm_trailing(x, 1, LN_EPS)?;
        let gamma = cx.param(&format!("{}.gamma", self.name))?;
        let beta = cx.param(&format!("{}.beta", self.name))?;
        let y = cx.g.mul_bc(y, gamma)?;
        cx.g.add_bc(y, beta)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, true)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, width, true)?,
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.up.forward(cx, x)?;
        let h = cx.g.relu(h)?;
        self.down.forward(cx, h)
    }
}

/// `x ← norm(x + attn(x, kv))`.
#[derive(Clone, Debug)]
struct AttnBlock {
    attn: Attention,
    norm: LayerNorm,
}

impl AttnBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(store, &format!("{name}.attn"), width, kv_dim, heads)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), width)?,
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var, kv: Option<Var>, trace: &mut Vec<Var>) -> Result<Var> {
        let (a, w) = self.attn.forward(cx, x, kv.unwrap_or(x))?;
        trace.push(w);
        let y = cx.g.add(x, a)?;
        self.norm.forward(cx, y)
    }
}

/// `x ← norm(x + ffn(x))`.
#[derive(Clone, Debug)]
struct FfnBlock {
    ffn: FeedForward,
    norm: LayerNorm,
}

impl FfnBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ffn: FeedForward::new(store, &format!("{name}.mlp"), width, hidden)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), width)?,
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let f = self.ffn.forward(cx, x)?;
        let y = cx.g.add(x, f)?;
        self.norm.forward(cx, y)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    audio_self: AttnBlock,
    query_self: AttnBlock,
    cross: AttnBlock,
    ffn: FfnBlock,
}

/// Shapes the decoder is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    pub classes: usize,
    pub object_dim: usize,
    pub motion_dim: usize,
    pub audio_dim: usize,
    pub mask_dim: usize,
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub cfg: TransformerConfig,
    pub dims: DecoderDims,
    name: String,
    naming: Linear,
    motion: AttnBlock,
    motion_ffn: FfnBlock,
    audio_embed: Linear,
    layers: Vec<DecoderLayer>,
    mlp_hidden: Linear,
    mlp_out: Linear,
}

/// Intermediate values exposed for inspection.
#[derive(Clone, Debug, Default)]
pub struct DecoderTrace {
    /// Every attention weight tensor, each `[R·heads, Lq, Lk]`.
    pub attention: Vec<Var>,
    /// Queries after visual naming `[R, N, width]`.
    pub named: Option<Var>,
    /// Mask embeddings for all queries `[R, N, mask_dim]`.
    pub mask_embeddings: Option<Var>,
}

impl QueryDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TransformerConfig, dims: DecoderDims) -> Result<Self> {
        cfg.validate()?;
        let (w, h) = (cfg.width, cfg.heads);
        let hidden = cfg.ffn_mult * w;
        let mut rng = store.rng_for(&format!("{name}.queries"));
        store.add_param(&format!("{name}.queries"), Tensor::uniform(&[dims.classes, w], -1.0, 1.0, &mut rng))?;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(DecoderLayer {
                    audio_self: AttnBlock::new(store, &format!("{p}.audio_self"), w, w, h)?,
                    query_self: AttnBlock::new(store, &format!("{p}.query_self"), w, w, h)?,
                    cross: AttnBlock::new(store, &format!("{p}.cross"), w, w, h)?,
                    ffn: FfnBlock::new(store, &format!("{p}.ffn"), w, hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            naming: Linear::new(store, &format!("{name}.naming"), dims.object_dim, w, true)?,
            motion: AttnBlock::new(store, &format!("{name}.motion"), w, dims.motion_dim, h)?,
            motion_ffn: FfnBlock::new(store, &format!("{name}.motion_ffn"), w, hidden)?,
            audio_embed: Linear::new(store, &format!("{name}.audio_embed"), dims.audio_dim, w, true)?,
            layers,
            mlp_hidden: Linear::new(store, &format!("{name}.mask_mlp.hidden"), w, w, true)?,
            mlp_out: Linear::new(store, &format!("{name}.mask_mlp.out"), w, dims.mask_dim, true)?,
            cfg,
            dims,
        })
    }

    /// `[R, N, width]`: the shared queries with row `r`'s projected object
    /// feature added to column `classes[r]`.
    pub fn visual_naming(&self, cx: &mut Ctx, object: Var, classes: &[usize]) -> Result<Var> {
        let n = self.dims.classes;
        let r = classes.len();
        if let Some(&c) = classes.iter().find(|&&c| c >= n) {
            return Err(Error::contract(format!("class id {c} outside [0, {n})")));
        }
        if cx.g.shape(object) != [r, self.dims.object_dim] {
            return Err(Error::contract(format!(
                "object features {:?} for {r} rows of width {}",
                cx.g.shape(object),
                self.dims.object_dim
            )));
        }
        let p = self.naming.forward(cx, object)?;
        self.add_named(cx, p, classes)
    }

    /// Visual naming with an already-projected feature `[R, width]`.
    pub fn add_named(&self, cx: &mut Ctx, projected: Var, classes: &[usize]) -> Result<Var> {
        let (n, w, r) = (self.dims.classes, self.cfg.width, classes.len());
        let mut onehot = vec![0.0; r * n];
        for (i, &c) in classes.iter().enumerate() {
            onehot[i * n + c] = 1.0;
        }
        let onehot = cx.g.constant(Tensor::new(&[r, n, 1], onehot)?);
        let p = cx.g.reshape(projected, &[r, 1, w])?;
        let delta = cx.g.mul_bc(onehot, p)?;
        let q = cx.param(&format!("{}.queries", self.name))?;
        cx.g.add_bc(delta, q)
    }

    /// Motion cross-attention then feed-forward. `motion: [R, motion_frames, motion_dim]`.
    pub fn motion_layer(&self, cx: &mut Ctx, q: Var, motion: Var, trace: &mut DecoderTrace) -> Result<Var> {
        let ms = cx.g.shape(motion).to_vec();
        if ms.len() != 3 || ms[2] != self.dims.motion_dim {
            return Err(Error::contract(format!("motion features must be [R, T', {}], got {ms:?}", self.dims.motion_dim)));
        }
        let q = self.motion.forward(cx, q, Some(motion), &mut trace.attention)?;
        self.motion_ffn.forward(cx, q)
    }

    /// Flattens `[R, bottleneck, h, w]` into tokens `[R, h·w, width]`.
    pub fn audio_tokens(&self, cx: &mut Ctx, fd: Var) -> Result<Var> {
        let s = cx.g.shape(fd).to_vec();
        if s.len() != 4 || s[1] != self.dims.audio_dim {
            return Err(Error::contract(format!("audio feature must be [R, {}, h, w], got {s:?}", self.dims.audio_dim)));
        }
        let (r, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = cx.g.reshape(fd, &[r, c, h * w])?;
        let t = cx.g.permute(t, &[0, 2, 1])?;
        let mut t = self.audio_embed.forward(cx, t)?;
        if self.cfg.positional {
            let pe = cx.g.constant(positional_2d(h, w, self.cfg.width));
            t = cx.g.add_bc(t, pe)?;
        }
        Ok(t)
    }

    /// Stacked decoder layers over queries `[R, N, width]` and audio
    /// tokens `[R, L, width]`. Returns `A_e`.
    pub fn av_decoder(&self, cx: &mut Ctx, mut q: Var, mut tokens: Var, trace: &mut DecoderTrace) -> Result<Var> {
        for layer in &self.layers {
            tokens = layer.audio_self.forward(cx, tokens, None, &mut trace.attention)?;
            q = layer.query_self.forward(cx, q, None, &mut trace.attention)?;
            q = layer.cross.forward(cx, q, Some(tokens), &mut trace.attention)?;
            q = layer.ffn.forward(cx, q)?;
        }
        Ok(q)
    }

    /// Mask embeddings `[R, N, mask_dim]`.
    pub fn mask_embeddings(&self, cx: &mut Ctx, ae: Var) -> Result<Var> {
        let h = self.mlp_hidden.forward(cx, ae)?;
        let h = cx.g.relu(h)?;
        self.mlp_out.forward(cx, h)
    }

    /// Full decoder for one row per source: returns mask embeddings of the
    /// selected classes, `[R, mask_dim]`.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        object: Var,
        motion: Var,
        fd: Var,
        classes: &[usize],
        trace: &mut DecoderTrace,
    ) -> Result<Var> {
        let named = self.visual_naming(cx, object, classes)?;
        trace.named = Some(named);
        let q = self.motion_layer(cx, named, motion, trace)?;
        let tokens = self.audio_tokens(cx, fd)?;
        let ae = self.av_decoder(cx, q, tokens, trace)?;
        let me = self.mask_embeddings(cx, ae)?;
        trace.mask_embeddings = Some(me);
        select_class_rows(cx, me, classes)
    }
}

/// Picks `me[r, classes[r], :]` for every row.
pub fn select_class_rows(cx: &mut Ctx, me: Var, classes: &[usize]) -> Result<Var> {
    let s = cx.g.shape(me).to_vec();
    if s.len() != 3 || s[0] != classes.len() || classes.iter().any(|&c| c >= s[1]) {
        return Err(Error::contract(format!("cannot select classes {classes:?} from {s:?}")));
    }
    let flat = cx.g.reshape(me, &[s[0] * s[1], s[2]])?;
    let idx: Vec<usize> = classes.iter().enumerate().map(|(r, &c)| r * s[1] + c).collect();
    cx.g.select_rows(flat, &idx)
}

/// Mask logits `[R, 1, F, T]` from embeddings `[R, C]` and features
/// `[R, C, F, T]`: the per-cell inner product over channels.
pub fn mask_logits(cx: &mut Ctx, embedding: Var, fa: Var) -> Result<Var> {
    let (es, fs) = (cx.g.shape(embedding).to_vec(), cx.g.shape(fa).to_vec());
    if es.len() != 2 || fs.len() != 4 || es[0] != fs[0] || es[1] != fs[1] {
        return Err(Error::contract(format!("mask embedding {es:?} does not match features {fs:?}")));
    }
    let (r, c, f, t) = (fs[0], fs[1], fs[2], fs[3]);
    let e = cx.g.reshape(embedding, &[r, 1, c])?;
    let a = cx.g.reshape(fa, &[r, c, f * t])?;
    let l = cx.g.matmul(e, a)?;
    cx.g.reshape(l, &[r, 1, f, t])
}

/// `sigmoid(mask_logits)`.
pub fn mask_heads(cx: &mut Ctx, embedding: Var, fa: Var) -> Result<Var> {
    let l = mask_logits(cx, embedding, fa)?;
    cx.g.sigmoid(l)
}

/// Fixed sinusoidal encoding `[h·w, width]`: the first half of the channels
/// encode the row, the second half the column.
pub fn positional_2d(h: usize, w: usize, width: usize) -> Tensor {
    let half = width / 2;
    let enc = |pos: usize, i: usize| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / half as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    let mut out = Vec::with_capacity(h * w * width);
    for y in 0..h {
        for x in 0..w {
            for i in 0..width {
                out.push(if i < half { enc(y, i) } else { enc(x, i - half) });
            }
        }
    }
    Tensor::new(&[h * w, width], out).expect("shape matches construction")
}
