//! The full multimodal classifier and its batch format.

use serde::{Deserialize, Serialize};

use crate::dataset::{LagWindow, MacdStats, PAD_ID};
use crate::embeddings::{PatchSpec, XposConfig};
use crate::encoders::{key_mask, EncoderConfig, LanguageEncoder, VisionEncoder, VisionPositions};
use crate::fusion::{
    fuse_price, mean_pool, ClassifierHead, FusionConfig, Pooling, QueryTargetAttention, SequenceProjection,
    TemporalPosition, PRICE_WIDTH,
};
use crate::nn::{Init, ParamStore, Session};
use crate::tensor::{Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub lag: usize,
    /// `[channels, height, width]` of every graph image.
    pub image: [usize; 3],
    pub patch: usize,
    pub language: EncoderConfig,
    pub vision: EncoderConfig,
    pub fusion: FusionConfig,
    /// xPos inside language attention; `None` disables positions there.
    pub xpos: Option<XposConfig>,
    pub vision_positions: VisionPositions,
    /// Mask PAD keys in language attention.
    pub pad_mask: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 30_522,
            seq_len: 128,
            lag: 5,
            image: [3, 224, 224],
            patch: 16,
            language: EncoderConfig::default(),
            vision: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            xpos: Some(XposConfig::default()),
            vision_positions: VisionPositions::default(),
            pad_mask: true,
            init_std: 0.02,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for tests and CPU experiments.
    pub fn toy() -> Self {
        Self {
            vocab_size: 16,
            seq_len: 4,
            lag: 2,
            image: [3, 8, 8],
            patch: 4,
            language: EncoderConfig::toy(8, 2),
            vision: EncoderConfig::toy(8, 2),
            ..Self::default()
        }
    }

    /// Drops every addition the plain architecture does not describe:
    /// padding masks, the temporal residual and the temporal feed-forward.
    pub fn strict(mut self) -> Self {
        self.pad_mask = false;
        self.fusion.mask_aware_pool = false;
        self.fusion.temporal_residual = false;
        self.fusion.temporal_ffn = false;
        self
    }

    pub fn d_t(&self) -> usize {
        self.fusion.d_t(self.language.d)
    }

    pub fn d_final(&self) -> usize {
        self.fusion.d_final(self.language.d, self.vision.d)
    }

    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            patch: self.patch,
            channels: self.image[0],
            d_p: self.vision.d,
        }
    }

    pub fn num_patches(&self) -> Result<usize> {
        self.patch_spec().num_patches(self.image[1], self.image[2])
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.fusion.modalities;
        if !m.any() {
            return Err(TensorError::Contract("at least one modality must be enabled".into()));
        }
        if self.lag == 0 || self.seq_len == 0 {
            return Err(TensorError::Contract("lag and sequence length must be >= 1".into()));
        }
        if m.text {
            self.language.validate()?;
            if self.vocab_size <= PAD_ID as usize {
                return Err(TensorError::Contract("vocabulary cannot hold the PAD id".into()));
            }
            if self.xpos.is_some() && !self.language.head_dim().is_multiple_of(2) {
                return Err(TensorError::Contract(format!(
                    "xPos needs an even language head width, got {}",
                    self.language.head_dim()
                )));
            }
        }
        if m.image {
            self.vision.validate()?;
            self.num_patches()?;
            let dh = self.vision.head_dim();
            if self.vision_positions.temporal_rotary && !dh.is_multiple_of(2) {
                return Err(TensorError::Contract(format!(
                    "temporal rotary needs an even vision head width, got {dh}"
                )));
            }
            if self.vision_positions.spatial_axial && !dh.is_multiple_of(4) {
                return Err(TensorError::Contract(format!(
                    "axial rotary needs a vision head width divisible by 4, got {dh}"
                )));
            }
        }
        if m.text || m.price {
            let d = self.d_t();
            let h = self.fusion.temporal_heads;
            if h == 0 || !d.is_multiple_of(h) {
                return Err(TensorError::Contract(format!(
                    "temporal width {d} not divisible by {h} heads"
                )));
            }
            if self.fusion.temporal_position == TemporalPosition::Rotary && !(d / h).is_multiple_of(2) {
                return Err(TensorError::Contract(format!(
                    "rotary over lag days needs an even temporal head width, got {}",
                    d / h
                )));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(TensorError::Contract(format!("init std {}", self.init_std)));
        }
        Ok(())
    }
}

/// Model inputs for `b` windows of `l` lag days.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub l: usize,
    pub s: usize,
    /// `b·l·s` token ids.
    pub ids: Vec<u32>,
    /// `[b, l, 5]` normalized MACD rows.
    pub macd: Tensor,
    /// `[b, l, c, H, W]` graph images, when the image branch needs them.
    pub images: Option<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_windows(windows: &[&LagWindow], stats: &MacdStats, with_images: bool) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| TensorError::Contract("empty batch".into()))?;
        let (b, l) = (windows.len(), first.lag());
        let s = first.tokens.first().map_or(0, Vec::len);
        let img_shape = first.graphs.first().map(|g| g.shape());
        let mut ids = Vec::with_capacity(b * l * s);
        let mut macd = Vec::with_capacity(b * l * PRICE_WIDTH);
        let mut pixels = Vec::new();
        let mut labels = Vec::with_capacity(b);
        for w in windows {
            if w.lag() != l || w.tokens.iter().any(|t| t.len() != s) {
                return Err(TensorError::Dimension(format!(
                    "window {} {} does not match the batch layout",
                    w.ticker, w.target_date
                )));
            }
            for t in &w.tokens {
                ids.extend_from_slice(t);
            }
            for row in &w.macd {
                macd.extend_from_slice(&stats.apply(row));
            }
            if with_images {
                for g in &w.graphs {
                    if Some(g.shape()) != img_shape {
                        return Err(TensorError::Dimension("graph shapes differ within a batch".into()));
                    }
                    pixels.extend(g.data.iter().map(|&v| f64::from(v)));
                }
            }
            labels.push(usize::from(w.label));
        }
        let images = match (with_images, img_shape) {
            (true, Some([c, h, wd])) => Some(Tensor::new(vec![b, l, c, h, wd], pixels)?),
            (true, None) => return Err(TensorError::Contract("windows carry no graphs".into())),
            _ => None,
        };
        Ok(Self {
            b,
            l,
            s,
            ids,
            macd: Tensor::new(vec![b, l, PRICE_WIDTH], macd)?,
            images,
            labels,
        })
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOutput {
    pub logits: Var,
    pub l_out: Option<Var>,
    pub i_out: Option<Var>,
    pub t_seq: Option<Var>,
    pub t_lang: Option<Var>,
    pub t_img: Option<Var>,
    pub temporal_weights: Option<Var>,
}

#[derive(Default)]
struct Partial {
    l_out: Option<Var>,
    i_out: Option<Var>,
    t_seq: Option<Var>,
    t_lang: Option<Var>,
    t_img: Option<Var>,
    temporal_weights: Option<Var>,
}

/// Module layout; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub language: Option<LanguageEncoder>,
    pub text_proj: Option<SequenceProjection>,
    pub vision: Option<VisionEncoder>,
    pub image_proj: Option<SequenceProjection>,
    pub temporal: Option<QueryTargetAttention>,
    pub head: ClassifierHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Meant {
    pub arch: Architecture,
    pub store: ParamStore,
}

impl Meant {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed, cfg.init_std);
        let m = cfg.fusion.modalities;
        let language = if m.text {
            let pad = cfg.pad_mask.then_some(PAD_ID);
            Some(LanguageEncoder::new(
                &mut store,
                &mut init,
                "lang",
                &cfg.language,
                cfg.vocab_size,
                cfg.xpos,
                pad,
            )?)
        } else {
            None
        };
        let text_proj = if m.text && cfg.fusion.pooling == Pooling::SeqProj {
            Some(SequenceProjection::new(
                &mut store,
                "fusion.text_proj",
                cfg.seq_len,
                cfg.language.d,
                cfg.language.norm,
            )?)
        } else {
            None
        };
        let temporal = if m.text || m.price {
            let ffn = cfg
                .fusion
                .temporal_ffn
                .then_some((cfg.fusion.mlp_ratio, cfg.language.norm));
            Some(QueryTargetAttention::new(
                &mut store,
                &mut init,
                "fusion.temporal",
                cfg.d_t(),
                cfg.fusion.temporal_heads,
                cfg.fusion.temporal_residual,
                cfg.fusion.temporal_position,
                ffn,
            )?)
        } else {
            None
        };
        let (vision, image_proj) = if m.image {
            let v = VisionEncoder::new(
                &mut store,
                &mut init,
                "vision",
                &cfg.vision,
                cfg.patch,
                cfg.image[0],
                cfg.vision_positions,
            )?;
            let p = cfg.lag * cfg.num_patches()?;
            let proj = SequenceProjection::new(&mut store, "fusion.image_proj", p, cfg.vision.d, cfg.vision.norm)?;
            (Some(v), Some(proj))
        } else {
            (None, None)
        };
        let head = ClassifierHead::new(&mut store, &mut init, "head", cfg.d_final())?;
        Ok(Self {
            arch: Architecture {
                cfg,
                language,
                text_proj,
                vision,
                image_proj,
                temporal,
                head,
            },
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Class predictions without recording gradients.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let mut s = Session::inference(&self.store);
        let out = self.arch.forward(&mut s, batch)?;
        Ok(argmax_rows(s.tape.data(out.logits), 2))
    }
}

pub fn argmax_rows(data: &[f64], width: usize) -> Vec<usize> {
    data.chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

impl Architecture {
    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.cfg;
        if batch.l != c.lag {
            return Err(TensorError::Dimension(format!(
                "batch lag {} but model lag {}",
                batch.l, c.lag
            )));
        }
        if c.fusion.modalities.text {
            if batch.s != c.seq_len {
                return Err(TensorError::Dimension(format!(
                    "batch sequence length {} but model expects {}",
                    batch.s, c.seq_len
                )));
            }
            if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
                return Err(TensorError::Index {
                    index: id as usize,
                    extent: c.vocab_size,
                });
            }
        }
        if c.fusion.modalities.image {
            let img = batch
                .images
                .as_ref()
                .ok_or_else(|| TensorError::Contract("image branch enabled but batch has no images".into()))?;
            if img.shape()[2..] != c.image {
                return Err(TensorError::Dimension(format!(
                    "images {:?} but model expects {:?}",
                    &img.shape()[2..],
                    c.image
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session, batch: &Batch) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let (b, l, sq) = (batch.b, batch.l, batch.s);
        let mut out = Partial::default();

        let l_seq = match &self.language {
            Some(lang) => {
                let l_out = lang.forward(s, &batch.ids, b, l, sq)?;
                out.l_out = Some(l_out);
                Some(match &self.text_proj {
                    Some(p) => p.forward(s, l_out)?,
                    None => {
                        let mask = self
                            .cfg
                            .fusion
                            .mask_aware_pool
                            .then(|| key_mask(&batch.ids, sq, PAD_ID));
                        mean_pool(s, l_out, mask.as_deref())?
                    }
                })
            }
            None => None,
        };
        let macd = self.cfg.fusion.modalities.price.then(|| s.constant(batch.macd.clone()));
        let mut parts = Vec::new();
        if let Some(temporal) = &self.temporal {
            let t = fuse_price(s, l_seq, macd)?;
            out.t_seq = Some(t);
            let (t_lang, w) = temporal.forward(s, t)?;
            out.t_lang = Some(t_lang);
            out.temporal_weights = Some(w);
            parts.push(t_lang);
        }
        if let (Some(vision), Some(proj)) = (&self.vision, &self.image_proj) {
            let images = batch.images.as_ref().expect("checked above");
            let i_out = vision.forward(s, images)?;
            out.i_out = Some(i_out);
            let t_img = proj.forward(s, i_out)?;
            out.t_img = Some(t_img);
            parts.push(t_img);
        }
        let logits = self.head.forward(s, &parts)?;
        Ok(ForwardOutput {
            logits,
            l_out: out.l_out,
            i_out: out.i_out,
            t_seq: out.t_seq,
            t_lang: out.t_lang,
            t_img: out.t_img,
            temporal_weights: out.temporal_weights,
        })
    }

    /// Mean cross-entropy of the batch labels.
    pub fn loss(&self, s: &mut Session, batch: &Batch) -> Result<Var> {
        let out = self.forward(s, batch)?;
        s.tape.cross_entropy(out.logits, &batch.labels)
    }
}
