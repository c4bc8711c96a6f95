//! Self-attention, the language and divided space-time blocks, and the two
//! encoder pipelines.

use serde::{Deserialize, Serialize};

use crate::embeddings::{
    axial_rotation, rotary_rotation, xpos_rotation, AxialMode, EmbeddingTable, PatchEmbed, PatchSpec, XposConfig,
};
use crate::nn::{Init, Linear, Norm, ParamStore, Session};
use crate::tensor::{NormMode, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub norm: NormMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            d: 768,
            heads: 8,
            mlp_ratio: 4,
            norm: NormMode::Rms,
        }
    }
}

impl EncoderConfig {
    pub fn toy(d: usize, heads: usize) -> Self {
        Self {
            d,
            heads,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(TensorError::Contract("encoder depth must be >= 1".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(TensorError::Contract(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(TensorError::Contract("mlp ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Standard-deviation multiplier for output projections.
    pub fn residual_gain(&self) -> f64 {
        1.0 / (2.0 * self.depth as f64).sqrt()
    }
}

/// Position encoding applied to per-head queries and keys.
#[derive(Debug, Clone, PartialEq)]
pub enum Positional {
    None,
    Rotary {
        positions: Vec<usize>,
        base: f64,
    },
    Xpos {
        positions: Vec<usize>,
        cfg: XposConfig,
    },
    Axial {
        rows: Vec<usize>,
        cols: Vec<usize>,
        mode: AxialMode,
        base: f64,
    },
}

impl Positional {
    fn apply(&self, s: &mut Session, q: Var, k: Var, dh: usize) -> Result<(Var, Var)> {
        let (rq, rk) = match self {
            Positional::None => return Ok((q, k)),
            Positional::Rotary { positions, base } => {
                let r = rotary_rotation(positions, dh, *base)?;
                (r.clone(), r)
            }
            Positional::Xpos { positions, cfg } => (
                xpos_rotation(positions, dh, cfg, true)?,
                xpos_rotation(positions, dh, cfg, false)?,
            ),
            Positional::Axial { rows, cols, mode, base } => {
                let r = axial_rotation(rows, cols, dh, *mode, *base)?;
                (r.clone(), r)
            }
        };
        Ok((rq.apply(&mut s.tape, q)?, rk.apply(&mut s.tape, k)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
        out_gain: f64,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::Contract(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, init, &format!("{name}.wq"), d, d)?,
            wk: Linear::unbiased(store, init, &format!("{name}.wk"), d, d)?,
            wv: Linear::new(store, init, &format!("{name}.wv"), d, d)?,
            wo: Linear::scaled(store, init, &format!("{name}.wo"), d, d, out_gain)?,
            heads,
            d,
        })
    }

    /// `[B, n, d] → [B, h, n, d/h]`.
    fn split_heads(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        let x = s.tape.reshape(x, &[sh[0], sh[1], self.heads, self.d / self.heads])?;
        s.tape.permute(x, &[0, 2, 1, 3])
    }

    fn merge_heads(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        let x = s.tape.permute(x, &[0, 2, 1, 3])?;
        s.tape.reshape(x, &[sh[0], sh[2], self.d])
    }

    pub fn forward(&self, s: &mut Session, x: Var, mask: Option<&[bool]>, pos: &Positional) -> Result<Var> {
        Ok(self.forward_with_weights(s, x, mask, pos)?.0)
    }

    /// Also returns the attention probabilities `[B, h, n, n]`.
    /// `mask` holds `B·n` flags, `true` meaning the key may be attended.
    pub fn forward_with_weights(
        &self,
        s: &mut Session,
        x: Var,
        mask: Option<&[bool]>,
        pos: &Positional,
    ) -> Result<(Var, Var)> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(TensorError::Dimension(format!(
                "attention expects [B, n, {}], got {shape:?}",
                self.d
            )));
        }
        let (b, n) = (shape[0], shape[1]);
        let dh = self.d / self.heads;
        let q = self.wq.forward(s, x)?;
        let k = self.wk.forward(s, x)?;
        let v = self.wv.forward(s, x)?;
        let q = self.split_heads(s, q)?;
        let k = self.split_heads(s, k)?;
        let v = self.split_heads(s, v)?;
        let (q, k) = pos.apply(s, q, k, dh)?;
        let kt = s.tape.transpose_last(k)?;
        let logits = s.tape.matmul(q, kt)?;
        let mut logits = s.tape.scale(logits, 1.0 / (dh as f64).sqrt());
        if let Some(mask) = mask {
            if mask.len() != b * n {
                return Err(TensorError::Dimension(format!(
                    "mask of {} flags for {b}x{n} tokens",
                    mask.len()
                )));
            }
            let bias = mask
                .iter()
                .map(|&keep| if keep { 0.0 } else { f64::NEG_INFINITY })
                .collect();
            let bias = s.constant(Tensor::new(vec![b, 1, 1, n], bias)?);
            logits = s.tape.add(logits, bias)?;
        }
        let probs = s.tape.softmax(logits)?;
        let ctx = s.tape.matmul(probs, v)?;
        let ctx = self.merge_heads(s, ctx)?;
        Ok((self.wo.forward(s, ctx)?, probs))
    }
}

/// Two-layer position-wise MLP, optionally with a norm after the expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub inner: Option<Norm>,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        hidden: usize,
        inner: Option<NormMode>,
        out_gain: f64,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, init, &format!("{name}.up"), d, hidden)?,
            inner: inner
                .map(|m| Norm::new(store, &format!("{name}.inner_norm"), hidden, m))
                .transpose()?,
            down: Linear::scaled(store, init, &format!("{name}.down"), hidden, d, out_gain)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = self.up.forward(s, x)?;
        if let Some(n) = &self.inner {
            h = n.forward(s, h)?;
        }
        let h = s.tape.gelu(h);
        self.down.forward(s, h)
    }
}

/// Pre-norm block with an extra norm inside the feed-forward branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageBlock {
    pub ln_attn: Norm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

impl LanguageBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let gain = cfg.residual_gain();
        Ok(Self {
            ln_attn: Norm::new(store, &format!("{name}.ln_attn"), cfg.d, cfg.norm)?,
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg.d, cfg.heads, gain)?,
            ln_ffn: Norm::new(store, &format!("{name}.ln_ffn"), cfg.d, cfg.norm)?,
            ffn: FeedForward::new(
                store,
                init,
                &format!("{name}.ffn"),
                cfg.d,
                cfg.d * cfg.mlp_ratio,
                Some(cfg.norm),
                gain,
            )?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, mask: Option<&[bool]>, pos: &Positional) -> Result<Var> {
        let h = self.ln_attn.forward(s, x)?;
        let a = self.attn.forward(s, h, mask, pos)?;
        let x = s.tape.add(x, a)?;
        let h = self.ln_ffn.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        s.tape.add(x, f)
    }
}

/// Temporal attention across frames, spatial attention within frames, then
/// a feed-forward layer; each stage is pre-norm with a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeBlock {
    pub ln_time: Norm,
    pub time_attn: MultiHeadAttention,
    pub ln_space: Norm,
    pub space_attn: MultiHeadAttention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

/// Position settings shared by every vision block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionPositions {
    pub temporal_rotary: bool,
    pub spatial_axial: bool,
    pub axial_mode: AxialMode,
    pub base: f64,
}

impl Default for VisionPositions {
    fn default() -> Self {
        Self {
            temporal_rotary: true,
            spatial_axial: true,
            axial_mode: AxialMode::Standard,
            base: crate::embeddings::ROTARY_BASE,
        }
    }
}

impl SpaceTimeBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let gain = cfg.residual_gain();
        Ok(Self {
            ln_time: Norm::new(store, &format!("{name}.ln_time"), cfg.d, cfg.norm)?,
            time_attn: MultiHeadAttention::new(store, init, &format!("{name}.time_attn"), cfg.d, cfg.heads, gain)?,
            ln_space: Norm::new(store, &format!("{name}.ln_space"), cfg.d, cfg.norm)?,
            space_attn: MultiHeadAttention::new(store, init, &format!("{name}.space_attn"), cfg.d, cfg.heads, gain)?,
            ln_ffn: Norm::new(store, &format!("{name}.ln_ffn"), cfg.d, cfg.norm)?,
            ffn: FeedForward::new(
                store,
                init,
                &format!("{name}.ffn"),
                cfg.d,
                cfg.d * cfg.mlp_ratio,
                None,
                gain,
            )?,
        })
    }

    /// Temporal stage only: `[b, l, n_p, d] → [b, l, n_p, d]`.
    pub fn temporal(&self, s: &mut Session, x: Var, pos: &VisionPositions) -> Result<Var> {
        let [b, l, np, d] = dims4(s, x)?;
        let h = self.ln_time.forward(s, x)?;
        let h = s.tape.permute(h, &[0, 2, 1, 3])?;
        let h = s.tape.reshape(h, &[b * np, l, d])?;
        let p = if pos.temporal_rotary {
            Positional::Rotary {
                positions: (0..l).collect(),
                base: pos.base,
            }
        } else {
            Positional::None
        };
        let a = self.time_attn.forward(s, h, None, &p)?;
        let a = s.tape.reshape(a, &[b, np, l, d])?;
        let a = s.tape.permute(a, &[0, 2, 1, 3])?;
        s.tape.add(x, a)
    }

    pub fn forward(&self, s: &mut Session, x: Var, grid: (usize, usize), pos: &VisionPositions) -> Result<Var> {
        let x = self.temporal(s, x, pos)?;
        let [b, l, np, d] = dims4(s, x)?;
        if grid.0 * grid.1 != np {
            return Err(TensorError::Dimension(format!(
                "grid {grid:?} does not hold {np} patches"
            )));
        }
        let h = self.ln_space.forward(s, x)?;
        let h = s.tape.reshape(h, &[b * l, np, d])?;
        let p = if pos.spatial_axial {
            Positional::Axial {
                rows: (0..np).map(|i| i / grid.1).collect(),
                cols: (0..np).map(|i| i % grid.1).collect(),
                mode: pos.axial_mode,
                base: pos.base,
            }
        } else {
            Positional::None
        };
        let a = self.space_attn.forward(s, h, None, &p)?;
        let a = s.tape.reshape(a, &[b, l, np, d])?;
        let x = s.tape.add(x, a)?;
        let h = self.ln_ffn.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        s.tape.add(x, f)
    }
}

fn dims4(s: &Session, x: Var) -> Result<[usize; 4]> {
    let sh = s.tape.shape(x);
    <[usize; 4]>::try_from(sh).map_err(|_| TensorError::Dimension(format!("expected a rank-4 tensor, got {sh:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEncoder {
    pub cfg: EncoderConfig,
    pub embed: EmbeddingTable,
    pub blocks: Vec<LanguageBlock>,
    pub xpos: Option<XposConfig>,
    pub pad_mask: Option<u32>,
}

impl LanguageEncoder {
    /// `pad_mask` names the PAD id whose keys are masked; `None` attends to all.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: &EncoderConfig,
        vocab: usize,
        xpos: Option<XposConfig>,
        pad_mask: Option<u32>,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = EmbeddingTable::new(store, init, &format!("{name}.embed"), vocab, cfg.d)?;
        let blocks = (0..cfg.depth)
            .map(|i| LanguageBlock::new(store, init, &format!("{name}.block{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: *cfg,
            embed,
            blocks,
            xpos,
            pad_mask,
        })
    }

    /// `[b, l, s]` ids to `L_out: [b, l, s, d]`; every lag day is encoded on its own.
    pub fn forward(&self, s: &mut Session, ids: &[u32], b: usize, l: usize, sq: usize) -> Result<Var> {
        if ids.len() != b * l * sq {
            return Err(TensorError::Dimension(format!("{} ids for {b}x{l}x{sq}", ids.len())));
        }
        let x = self.embed.forward(s, ids, &[b * l, sq])?;
        let mask = self.pad_mask.map(|pad| key_mask(ids, sq, pad));
        let pos = match self.xpos {
            Some(cfg) => Positional::Xpos {
                positions: (0..sq).collect(),
                cfg,
            },
            None => Positional::None,
        };
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(s, x, mask.as_deref(), &pos)?;
        }
        s.tape.reshape(x, &[b, l, sq, self.cfg.d])
    }
}

/// Keys equal to `pad` are masked; a row made only of padding keeps its
/// first key so the softmax stays defined.
pub fn key_mask(ids: &[u32], sq: usize, pad: u32) -> Vec<bool> {
    let mut mask: Vec<bool> = ids.iter().map(|&i| i != pad).collect();
    for row in mask.chunks_mut(sq) {
        if !row.iter().any(|&k| k) {
            row[0] = true;
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub patch: PatchEmbed,
    pub blocks: Vec<SpaceTimeBlock>,
    pub positions: VisionPositions,
}

impl VisionEncoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: &EncoderConfig,
        patch: usize,
        channels: usize,
        positions: VisionPositions,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec = PatchSpec {
            patch,
            channels,
            d_p: cfg.d,
        };
        let patch = PatchEmbed::new(store, init, &format!("{name}.patch"), spec)?;
        let blocks = (0..cfg.depth)
            .map(|i| SpaceTimeBlock::new(store, init, &format!("{name}.block{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: *cfg,
            patch,
            blocks,
            positions,
        })
    }

    /// `[b, l, c, H, W]` images to `I_out: [b, l·n_p, d]`.
    pub fn forward(&self, s: &mut Session, images: &Tensor) -> Result<Var> {
        let sh = images.shape();
        if sh.len() != 5 {
            return Err(TensorError::Dimension(format!(
                "images must be [b, l, c, H, W], got {sh:?}"
            )));
        }
        let (b, l) = (sh[0], sh[1]);
        let grid = self.patch.spec.grid(sh[3], sh[4])?;
        let mut x = self.patch.forward(s, images)?;
        for block in &self.blocks {
            x = block.forward(s, x, grid, &self.positions)?;
        }
        s.tape.reshape(x, &[b, l * grid.0 * grid.1, self.cfg.d])
    }
}
