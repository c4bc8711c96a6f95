//! Deterministic rasterization of MACD graphs and their binary blob format.

use serde::{Deserialize, Serialize};

use super::{DatasetError, Result};
use crate::indicators::IndicatorSeries;

const BLOB_MAGIC: &[u8; 4] = b"MGPH";
const BLOB_HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSpec {
    pub window_days: usize,
    pub width: usize,
    pub height: usize,
    /// Fraction of the value span added above and below the plotted range.
    pub margin: f64,
    pub macd_color: [f32; 3],
    pub signal_color: [f32; 3],
    pub positive_bar_color: [f32; 3],
    pub negative_bar_color: [f32; 3],
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self {
            window_days: 26,
            width: 224,
            height: 224,
            margin: 0.1,
            macd_color: [0.0, 0.0, 1.0],
            signal_color: [1.0, 0.0, 0.0],
            positive_bar_color: [0.0, 0.6, 0.0],
            negative_bar_color: [1.0, 0.6, 0.0],
        }
    }
}

impl GraphSpec {
    pub const CHANNELS: usize = 3;

    pub fn with_size(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(DatasetError::Contract(format!(
                "graph size {}x{} below 32x32",
                self.width, self.height
            )));
        }
        if self.window_days < 2 {
            return Err(DatasetError::Contract("graph window must span >= 2 days".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(DatasetError::Contract(format!("margin {}", self.margin)));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [Self::CHANNELS, self.height, self.width]
    }
}

/// Channel-major `channels × height × width` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GraphImage {
    fn blank(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![1.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let at = row * self.width + col;
        [self.data[at], self.data[plane + at], self.data[2 * plane + at]]
    }

    fn put(&mut self, row: i64, col: i64, color: [f32; 3]) {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            return;
        }
        let plane = self.height * self.width;
        let at = row as usize * self.width + col as usize;
        for (c, v) in color.iter().enumerate() {
            self.data[c * plane + at] = *v;
        }
    }

    /// Bresenham segment; integer-only so output is bit-reproducible.
    fn line(&mut self, (r0, c0): (i64, i64), (r1, c1): (i64, i64), color: [f32; 3]) {
        let (dc, dr) = ((c1 - c0).abs(), -(r1 - r0).abs());
        let (sc, sr) = (if c0 < c1 { 1 } else { -1 }, if r0 < r1 { 1 } else { -1 });
        let (mut c, mut r, mut err) = (c0, r0, dc + dr);
        loop {
            self.put(r, c, color);
            if c == c1 && r == r1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dr {
                err += dr;
                c += sc;
            }
            if e2 <= dc {
                err += dc;
                r += sr;
            }
        }
    }
}

/// Draws the `window_days` values ending at `end_day`: histogram bars about
/// the zero line, then the signal line, then the MACD line on top.
pub fn render_macd_graph(ind: &IndicatorSeries, end_day: usize, spec: &GraphSpec) -> Result<GraphImage> {
    spec.validate()?;
    let n = spec.window_days;
    if end_day + 1 < n || end_day >= ind.len() {
        return Err(DatasetError::Range(format!(
            "graph ending at day {end_day} needs {n} days of history within {} days",
            ind.len()
        )));
    }
    let start = end_day + 1 - n;
    let macd = &ind.macd[start..=end_day];
    let signal = &ind.signal[start..=end_day];
    let hist = &ind.histogram[start..=end_day];

    let all = macd.iter().chain(signal).chain(hist);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
        let mid = 0.5 * (hi + lo);
        lo = mid - 1.0;
        hi = mid + 1.0;
    }
    let pad = spec.margin * (hi - lo);
    lo -= pad;
    hi += pad;

    let (h, w) = (spec.height, spec.width);
    let row_of = |v: f64| -> i64 {
        let r = ((hi - v) / (hi - lo) * (h - 1) as f64).round() as i64;
        r.clamp(0, h as i64 - 1)
    };
    let step = (w - 1) as f64 / (n - 1) as f64;
    let col_of = |j: usize| -> i64 { (j as f64 * step).round() as i64 };
    let half_bar = (0.3 * step).floor() as i64;

    let mut img = GraphImage::blank(GraphSpec::CHANNELS, h, w);
    let zero = row_of(0.0);
    for (j, &v) in hist.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let color = if v > 0.0 {
            spec.positive_bar_color
        } else {
            spec.negative_bar_color
        };
        let r = row_of(v);
        let c = col_of(j);
        for row in r.min(zero)..=r.max(zero) {
            for col in c - half_bar..=c + half_bar {
                img.put(row, col, color);
            }
        }
    }
    for (series, color) in [(signal, spec.signal_color), (macd, spec.macd_color)] {
        for j in 1..n {
            img.line(
                (row_of(series[j - 1]), col_of(j - 1)),
                (row_of(series[j]), col_of(j)),
                color,
            );
        }
    }
    Ok(img)
}

/// `MGPH`, u32 channels/height/width, f32 pixels, CRC32 footer; all little-endian.
pub fn encode_graph_blob(img: &GraphImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOB_HEADER + 4 * img.data.len() + 4);
    out.extend_from_slice(BLOB_MAGIC);
    for v in [img.channels, img.height, img.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_graph_blob(bytes: &[u8], name: &str) -> Result<GraphImage> {
    if bytes.len() < BLOB_HEADER {
        return Err(DatasetError::Truncated(name.to_string()));
    }
    if &bytes[..4] != BLOB_MAGIC {
        return Err(DatasetError::Format {
            path: name.to_string(),
            message: "bad magic".into(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (channels, height, width) = (word(0), word(1), word(2));
    let count = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| DatasetError::Format {
            path: name.to_string(),
            message: "image extents overflow".into(),
        })?;
    let expected = BLOB_HEADER + 4 * count + 4;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated(name.to_string()));
    }
    if bytes.len() > expected {
        return Err(DatasetError::Format {
            path: name.to_string(),
            message: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(DatasetError::Checksum(name.to_string()));
    }
    let data = body[BLOB_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(GraphImage {
        channels,
        height,
        width,
        data,
    })
}

/// Binary PPM (P6) for visual inspection.
pub fn write_ppm(img: &GraphImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for r in 0..img.height {
        for c in 0..img.width {
            for v in img.pixel(r, c) {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}
