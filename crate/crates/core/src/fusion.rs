//! Per-day reduction of language encodings, price fusion, query-targeted
//! temporal attention, image reduction and the classification head.

use serde::{Deserialize, Serialize};

use crate::embeddings::{rotary_rotation, ROTARY_BASE};
use crate::encoders::FeedForward;
use crate::nn::{Init, Linear, Norm, ParamId, ParamStore, Session};
use crate::tensor::{NormMode, Result, Tensor, TensorError, Var};

/// Width of one MACD feature row.
pub const PRICE_WIDTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    MeanPool,
    SeqProj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPosition {
    #[default]
    None,
    Rotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modalities {
    pub text: bool,
    pub image: bool,
    pub price: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Self {
            text: true,
            image: true,
            price: true,
        }
    }
}

impl Modalities {
    pub fn any(&self) -> bool {
        self.text || self.image || self.price
    }

    /// Every non-empty subset, in a fixed order.
    pub fn all_combinations() -> Vec<Modalities> {
        (1..8u8)
            .map(|m| Modalities {
                text: m & 1 != 0,
                image: m & 2 != 0,
                price: m & 4 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.text {
            parts.push("text");
        }
        if self.image {
            parts.push("image");
        }
        if self.price {
            parts.push("price");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub pooling: Pooling,
    /// Average only non-PAD positions when mean pooling.
    pub mask_aware_pool: bool,
    pub temporal_heads: usize,
    pub temporal_position: TemporalPosition,
    pub modalities: Modalities,
    /// Residual from the most recent lag day around temporal attention.
    pub temporal_residual: bool,
    /// Feed-forward sub-layer after temporal attention.
    pub temporal_ffn: bool,
    pub mlp_ratio: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::MeanPool,
            mask_aware_pool: false,
            temporal_heads: 1,
            temporal_position: TemporalPosition::None,
            modalities: Modalities::default(),
            temporal_residual: true,
            temporal_ffn: true,
            mlp_ratio: 4,
        }
    }
}

impl FusionConfig {
    /// Width of the fused temporal sequence.
    pub fn d_t(&self, d_l: usize) -> usize {
        d_l * usize::from(self.modalities.text) + PRICE_WIDTH * usize::from(self.modalities.price)
    }

    pub fn d_final(&self, d_l: usize, d_p: usize) -> usize {
        self.d_t(d_l) + d_p * usize::from(self.modalities.image)
    }
}

/// Average over the token axis of `[b, l, s, d]`. With `mask` (`b·l·s`
/// flags, `true` for real tokens) only flagged positions are averaged.
pub fn mean_pool(s: &mut Session, l_out: Var, mask: Option<&[bool]>) -> Result<Var> {
    let sh = s.tape.shape(l_out).to_vec();
    if sh.len() != 4 {
        return Err(TensorError::Dimension(format!(
            "mean_pool expects [b, l, s, d], got {sh:?}"
        )));
    }
    let Some(mask) = mask else {
        return s.tape.mean_axis(l_out, 2);
    };
    let sq = sh[2];
    if mask.len() * sh[3] != s.tape.value(l_out).len() {
        return Err(TensorError::Dimension(format!(
            "mask of {} flags for {sh:?}",
            mask.len()
        )));
    }
    let mut w = Vec::with_capacity(mask.len());
    for row in mask.chunks(sq) {
        let n = row.iter().filter(|&&k| k).count().max(1) as f64;
        w.extend(row.iter().map(|&k| if k { 1.0 / n } else { 0.0 }));
    }
    let w = s.constant(Tensor::new(vec![sh[0], sh[1], sq, 1], w)?);
    let weighted = s.tape.mul(l_out, w)?;
    s.tape.sum_axis(weighted, 2)
}

/// Learned reduction of the second-to-last axis:
/// `GELU(norm(W·xᵀ + b))`, with `W` of `len × 1` and a scalar bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
    pub len: usize,
    pub d: usize,
}

impl SequenceProjection {
    /// Weights start uniform (`1/len`), i.e. at the mean.
    pub fn new(store: &mut ParamStore, name: &str, len: usize, d: usize, mode: NormMode) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::full(&[len, 1], 1.0 / len as f64))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1]))?;
        let norm = Norm::new(store, &format!("{name}.norm"), d, mode)?;
        Ok(Self {
            weight,
            bias,
            norm,
            len,
            d,
        })
    }

    pub fn num_params(&self) -> usize {
        self.len + 1 + 2 * self.d
    }

    /// `[..., len, d] → [..., d]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        let r = sh.len();
        if r < 2 || sh[r - 2] != self.len || sh[r - 1] != self.d {
            return Err(TensorError::Dimension(format!(
                "sequence projection over {} x {} cannot take {sh:?}",
                self.len, self.d
            )));
        }
        let xt = s.tape.transpose_last(x)?;
        let w = s.param(self.weight);
        let y = s.tape.matmul(xt, w)?;
        let b = s.param(self.bias);
        let y = s.tape.add(y, b)?;
        let y = s
            .tape
            .reshape(y, &sh[..r - 2].iter().copied().chain([self.d]).collect::<Vec<_>>())?;
        let y = self.norm.forward(s, y)?;
        Ok(s.tape.gelu(y))
    }
}

/// `T = [L_seq, M]` along the feature axis; either part may be absent.
pub fn fuse_price(s: &mut Session, l_seq: Option<Var>, macd: Option<Var>) -> Result<Var> {
    match (l_seq, macd) {
        (Some(a), Some(m)) => {
            let (sa, sm) = (s.tape.shape(a).to_vec(), s.tape.shape(m).to_vec());
            if sa.len() != 3 || sm.len() != 3 || sa[..2] != sm[..2] || sm[2] != PRICE_WIDTH {
                return Err(TensorError::Dimension(format!("cannot fuse {sa:?} with prices {sm:?}")));
            }
            s.tape.concat(&[a, m], 2)
        }
        (Some(a), None) => Ok(a),
        (None, Some(m)) => Ok(m),
        (None, None) => Err(TensorError::Contract("fusion needs text or price features".into())),
    }
}

/// Attention whose single query comes from the most recent lag day.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTargetAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
    pub residual: bool,
    pub position: TemporalPosition,
    pub ffn: Option<(Norm, FeedForward)>,
}

impl QueryTargetAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
        residual: bool,
        position: TemporalPosition,
        ffn: Option<(usize, NormMode)>,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::Contract(format!(
                "temporal width {d} not divisible by {heads} heads"
            )));
        }
        if position == TemporalPosition::Rotary && !(d / heads).is_multiple_of(2) {
            return Err(TensorError::Dimension(format!(
                "rotary over lag days needs an even head width, got {}",
                d / heads
            )));
        }
        let gain = std::f64::consts::FRAC_1_SQRT_2;
        let ffn = match ffn {
            Some((ratio, mode)) => Some((
                Norm::new(store, &format!("{name}.ln_ffn"), d, mode)?,
                FeedForward::new(store, init, &format!("{name}.ffn"), d, d * ratio, None, gain)?,
            )),
            None => None,
        };
        Ok(Self {
            wq: Linear::new(store, init, &format!("{name}.wq"), d, d)?,
            wk: Linear::unbiased(store, init, &format!("{name}.wk"), d, d)?,
            wv: Linear::new(store, init, &format!("{name}.wv"), d, d)?,
            wo: Linear::scaled(store, init, &format!("{name}.wo"), d, d, gain)?,
            heads,
            d,
            residual,
            position,
            ffn,
        })
    }

    fn split(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        let x = s.tape.reshape(x, &[sh[0], sh[1], self.heads, self.d / self.heads])?;
        s.tape.permute(x, &[0, 2, 1, 3])
    }

    /// The targeted query `[b, h, 1, d/h]`, built from row `l − 1` alone.
    pub fn query(&self, s: &mut Session, t: Var) -> Result<Var> {
        let l = self.check(s, t)?;
        let last = s.tape.narrow(t, 1, l - 1, 1)?;
        let q = self.wq.forward(s, last)?;
        let q = self.split(s, q)?;
        match self.position {
            TemporalPosition::None => Ok(q),
            TemporalPosition::Rotary => {
                rotary_rotation(&[l - 1], self.d / self.heads, ROTARY_BASE)?.apply(&mut s.tape, q)
            }
        }
    }

    fn check(&self, s: &Session, t: Var) -> Result<usize> {
        let sh = s.tape.shape(t);
        if sh.len() != 3 || sh[2] != self.d {
            return Err(TensorError::Dimension(format!(
                "temporal attention expects [b, l, {}], got {sh:?}",
                self.d
            )));
        }
        Ok(sh[1])
    }

    /// Returns `T_lang: [b, d]` and the attention weights `[b, h, 1, l]`.
    pub fn forward(&self, s: &mut Session, t: Var) -> Result<(Var, Var)> {
        let l = self.check(s, t)?;
        let b = s.tape.shape(t)[0];
        let dh = self.d / self.heads;
        let q = self.query(s, t)?;
        let k = self.wk.forward(s, t)?;
        let k = self.split(s, k)?;
        let k = match self.position {
            TemporalPosition::None => k,
            TemporalPosition::Rotary => {
                let pos: Vec<usize> = (0..l).collect();
                rotary_rotation(&pos, dh, ROTARY_BASE)?.apply(&mut s.tape, k)?
            }
        };
        let v = self.wv.forward(s, t)?;
        let v = self.split(s, v)?;
        let kt = s.tape.transpose_last(k)?;
        let logits = s.tape.matmul(q, kt)?;
        let logits = s.tape.scale(logits, 1.0 / (dh as f64).sqrt());
        let weights = s.tape.softmax(logits)?;
        let ctx = s.tape.matmul(weights, v)?;
        let ctx = s.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.tape.reshape(ctx, &[b, self.d])?;
        let mut out = self.wo.forward(s, ctx)?;
        if self.residual {
            let last = s.tape.narrow(t, 1, l - 1, 1)?;
            let last = s.tape.reshape(last, &[b, self.d])?;
            out = s.tape.add(out, last)?;
        }
        if let Some((norm, ffn)) = &self.ffn {
            let h = norm.forward(s, out)?;
            let f = ffn.forward(s, h)?;
            out = s.tape.add(out, f)?;
        }
        Ok((out, weights))
    }
}

/// `Linear(d → d) → GELU → Linear(d → 2)` over the concatenated representations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub out: Linear,
    pub d: usize,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, init, &format!("{name}.hidden"), d, d)?,
            out: Linear::new(store, init, &format!("{name}.out"), d, 2)?,
            d,
        })
    }

    pub fn forward(&self, s: &mut Session, parts: &[Var]) -> Result<Var> {
        let x = match parts {
            [] => {
                return Err(TensorError::Contract(
                    "classifier needs at least one representation".into(),
                ))
            }
            [one] => *one,
            many => s.tape.concat(many, 1)?,
        };
        let h = self.hidden.forward(s, x)?;
        let h = s.tape.gelu(h);
        self.out.forward(s, h)
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.out.num_params()
    }
}
