//! Token and patch embeddings plus the rotary family of position encodings.

use serde::{Deserialize, Serialize};

use crate::nn::{Init, Linear, ParamId, ParamStore, Session};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

pub const ROTARY_BASE: f64 = 10_000.0;

/// Trainable `vocab × d` lookup table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingTable {
    pub weight: ParamId,
    pub vocab: usize,
    pub d: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, vocab: usize, d: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.default_normal(&[vocab, d])?)?;
        Ok(Self { weight, vocab, d })
    }

    /// `ids` laid out as `shape`; output is `shape ++ [d]`.
    pub fn forward(&self, s: &mut Session, ids: &[u32], shape: &[usize]) -> Result<Var> {
        let table = s.param(self.weight);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        s.tape.gather(table, &ids, shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub patch: usize,
    pub channels: usize,
    pub d_p: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch: 16,
            channels: 3,
            d_p: 768,
        }
    }
}

impl PatchSpec {
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Patch grid `(rows, cols)` for an `h × w` image.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.patch == 0 || !h.is_multiple_of(self.patch) || !w.is_multiple_of(self.patch) {
            return Err(TensorError::Dimension(format!(
                "image {h}x{w} is not divisible into {p}x{p} patches",
                p = self.patch
            )));
        }
        Ok((h / self.patch, w / self.patch))
    }

    pub fn num_patches(&self, h: usize, w: usize) -> Result<usize> {
        let (r, c) = self.grid(h, w)?;
        Ok(r * c)
    }
}

/// Splits `[..., c, H, W]` images into `[..., n_p, c·P·P]` patch rows.
///
/// Patches are ordered row-major over the grid; within a patch the flat
/// index is `ch·P·P + py·P + px`.
pub fn patchify(images: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() < 3 {
        return Err(TensorError::Dimension(format!("images need rank >= 3, got {shape:?}")));
    }
    let r = shape.len();
    let (c, h, w) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    if c != spec.channels {
        return Err(TensorError::Dimension(format!(
            "expected {} channels, got {c}",
            spec.channels
        )));
    }
    let (gr, gc) = spec.grid(h, w)?;
    let p = spec.patch;
    let lead: usize = shape[..r - 3].iter().product();
    let (np, pd) = (gr * gc, spec.patch_dim());
    let src = images.data();
    let mut out = vec![0.0; lead * np * pd];
    for f in 0..lead {
        let img = &src[f * c * h * w..(f + 1) * c * h * w];
        for gy in 0..gr {
            for gx in 0..gc {
                let base = (f * np + gy * gc + gx) * pd;
                for ch in 0..c {
                    for py in 0..p {
                        let row = &img[ch * h * w + (gy * p + py) * w + gx * p..][..p];
                        out[base + ch * p * p + py * p..][..p].copy_from_slice(row);
                    }
                }
            }
        }
    }
    let mut out_shape = shape[..r - 3].to_vec();
    out_shape.extend([np, pd]);
    Tensor::new(out_shape, out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchEmbed {
    pub spec: PatchSpec,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, spec: PatchSpec) -> Result<Self> {
        let proj = Linear::new(store, init, &format!("{name}.proj"), spec.patch_dim(), spec.d_p)?;
        Ok(Self { spec, proj })
    }

    /// `[b, l, c, H, W]` images to `[b, l, n_p, d_p]` patch embeddings.
    pub fn forward(&self, s: &mut Session, images: &Tensor) -> Result<Var> {
        let patches = patchify(images, &self.spec)?;
        let x = s.constant(patches);
        self.proj.forward(s, x)
    }
}

/// Per-position rotation tables for [`Tape::pair_rotate`]: `n × d/2` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    pub positions: usize,
    pub pairs: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Rotation {
    fn from_angles(positions: usize, pairs: usize, angle: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut cos = Vec::with_capacity(positions * pairs);
        let mut sin = Vec::with_capacity(positions * pairs);
        for p in 0..positions {
            for i in 0..pairs {
                let (c, s) = angle(p, i);
                cos.push(c);
                sin.push(s);
            }
        }
        Self {
            positions,
            pairs,
            cos,
            sin,
            scale: vec![1.0; positions * pairs],
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.pair_rotate(x, &self.cos, &self.sin, &self.scale)
    }
}

fn even(d: usize) -> Result<usize> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(TensorError::Dimension(format!(
            "rotary encodings need an even dimension, got {d}"
        )));
    }
    Ok(d / 2)
}

/// Standard rotary frequencies `θ_i = base^(−2i/d)`.
pub fn rotary_frequencies(d: usize, base: f64) -> Result<Vec<f64>> {
    let half = even(d)?;
    Ok((0..half).map(|i| base.powf(-2.0 * i as f64 / d as f64)).collect())
}

pub fn rotary_rotation(positions: &[usize], d: usize, base: f64) -> Result<Rotation> {
    let freq = rotary_frequencies(d, base)?;
    Ok(Rotation::from_angles(positions.len(), freq.len(), |p, i| {
        let a = positions[p] as f64 * freq[i];
        (a.cos(), a.sin())
    }))
}

/// Rotates `q` and `k` (`[..., n, d]`) by their positions.
pub fn apply_rotary(tape: &mut Tape, q: Var, k: Var, positions: &[usize], base: f64) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    let rot = rotary_rotation(positions, d, base)?;
    Ok((rot.apply(tape, q)?, rot.apply(tape, k)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XposConfig {
    pub gamma: f64,
    /// Positions are divided by this before exponentiating the decay.
    pub scale_base: f64,
    pub base: f64,
}

impl Default for XposConfig {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            scale_base: 512.0,
            base: ROTARY_BASE,
        }
    }
}

/// Per-pair decay `ζ_i = (i/(d/2) + γ)/(1 + γ)`.
pub fn xpos_decay(d: usize, gamma: f64) -> Result<Vec<f64>> {
    let half = even(d)?;
    Ok((0..half)
        .map(|i| (i as f64 / half as f64 + gamma) / (1.0 + gamma))
        .collect())
}

/// Rotary rotation with `ζ_i^(±pos/scale_base)` length scaling; queries
/// take the positive exponent and keys the negative one.
pub fn xpos_rotation(positions: &[usize], d: usize, cfg: &XposConfig, query: bool) -> Result<Rotation> {
    let mut rot = rotary_rotation(positions, d, cfg.base)?;
    let zeta = xpos_decay(d, cfg.gamma)?;
    let sign = if query { 1.0 } else { -1.0 };
    for (p, &pos) in positions.iter().enumerate() {
        for (i, z) in zeta.iter().enumerate() {
            rot.scale[p * zeta.len() + i] = z.powf(sign * pos as f64 / cfg.scale_base);
        }
    }
    Ok(rot)
}

pub fn apply_xpos(tape: &mut Tape, q: Var, k: Var, positions: &[usize], cfg: &XposConfig) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    let rq = xpos_rotation(positions, d, cfg, true)?;
    let rk = xpos_rotation(positions, d, cfg, false)?;
    Ok((rq.apply(tape, q)?, rk.apply(tape, k)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxialMode {
    /// Rotary frequencies per axis.
    #[default]
    Standard,
    /// `θ_i = i·⌊d/2⌋·π`; every angle is a multiple of π.
    Literal,
}

/// First half of the pairs follows the row index, second half the column.
pub fn axial_rotation(rows: &[usize], cols: &[usize], d: usize, mode: AxialMode, base: f64) -> Result<Rotation> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(TensorError::Dimension(format!(
            "axial rotary encodings need a dimension divisible by 4, got {d}"
        )));
    }
    if rows.len() != cols.len() {
        return Err(TensorError::Dimension(format!(
            "{} row indices vs {} column indices",
            rows.len(),
            cols.len()
        )));
    }
    let quarter = d / 4;
    let freq = rotary_frequencies(d / 2, base)?;
    Ok(Rotation::from_angles(rows.len(), 2 * quarter, |p, i| {
        let (pos, j) = if i < quarter {
            (rows[p], i)
        } else {
            (cols[p], i - quarter)
        };
        match mode {
            AxialMode::Standard => {
                let a = pos as f64 * freq[j];
                (a.cos(), a.sin())
            }
            AxialMode::Literal => {
                // pos·j·⌊d/2⌋·π: exact values of cos/sin at integer multiples of π
                let k = pos * j * (d / 2);
                (if k.is_multiple_of(2) { 1.0 } else { -1.0 }, 0.0)
            }
        }
    }))
}

pub fn apply_axial_rotary_2d(
    tape: &mut Tape,
    q: Var,
    k: Var,
    rows: &[usize],
    cols: &[usize],
    mode: AxialMode,
    base: f64,
) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    let rot = axial_rotation(rows, cols, d, mode, base)?;
    Ok((rot.apply(tape, q)?, rot.apply(tape, k)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_layout_is_channel_major() {
        let spec = PatchSpec {
            patch: 2,
            channels: 3,
            d_p: 4,
        };
        let img = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64);
        let p = patchify(&img, &spec).unwrap();
        assert_eq!(p.shape(), &[1, 4, 12]);
        // second patch of the first grid row: columns 2..4
        let second = &p.data()[12..24];
        assert_eq!(&second[..4], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(second[4], 18.0);
    }

    #[test]
    fn divisibility_enforced() {
        let spec = PatchSpec {
            patch: 16,
            channels: 3,
            d_p: 8,
        };
        assert_eq!(spec.num_patches(224, 224).unwrap(), 196);
        assert_eq!(spec.num_patches(32, 32).unwrap(), 4);
        assert!(spec.num_patches(30, 32).is_err());
    }

    #[test]
    fn dimension_checks() {
        assert!(rotary_rotation(&[0, 1], 7, ROTARY_BASE).is_err());
        assert!(axial_rotation(&[0], &[0], 6, AxialMode::Standard, ROTARY_BASE).is_err());
        assert!(xpos_rotation(&[0], 5, &XposConfig::default(), true).is_err());
    }
}
