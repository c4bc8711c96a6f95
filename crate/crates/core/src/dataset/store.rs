//! On-disk dataset layout: `manifest.json`, `windows.jsonl`, `vocab.json`
//! and one CRC-protected blob per lag-day graph under `graphs/`.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::build::BuildConfig;
use super::graph::{decode_graph_blob, encode_graph_blob};
use super::split::{split_by_dates, Splits};
use super::tokenizer::TokenizerSpec;
use super::{DatasetError, LagWindow, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Per-feature z-score statistics for the five MACD columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacdStats {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl MacdStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 5],
            std: [1.0; 5],
        }
    }

    /// Population statistics; a constant column keeps unit scale.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64; 5]>) -> Self {
        let rows: Vec<&[f64; 5]> = rows.into_iter().collect();
        if rows.is_empty() {
            return Self::identity();
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for k in 0..5 {
            mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            std[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64; 5]) -> [f64; 5] {
        std::array::from_fn(|k| (row[k] - self.mean[k]) / self.std[k])
    }
}

/// Last target date of the training and validation splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBounds {
    pub train_end: NaiveDate,
    pub val_end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub lag: usize,
    pub seq_len: usize,
    pub image_shape: [usize; 3],
    pub normalization: MacdStats,
    pub label_counts: [usize; 2],
    pub num_windows: usize,
    pub vocab_size: usize,
    pub split: Option<SplitBounds>,
    pub build: BuildConfig,
    pub windows_crc32: u32,
    pub vocab_crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    manifest: Manifest,
    windows: Vec<LagWindow>,
    tokenizer: TokenizerSpec,
}

impl Dataset {
    pub fn new(
        windows: Vec<LagWindow>,
        tokenizer: TokenizerSpec,
        build: &BuildConfig,
        normalization: MacdStats,
        split: Option<SplitBounds>,
    ) -> Result<Self> {
        let image_shape = build.graph.image_shape();
        let mut label_counts = [0usize; 2];
        for w in &windows {
            w.validate()?;
            if w.lag() != build.lag {
                return Err(DatasetError::Contract(format!(
                    "{} {}: lag {} but dataset lag is {}",
                    w.ticker,
                    w.target_date,
                    w.lag(),
                    build.lag
                )));
            }
            if w.tokens[0].len() != tokenizer.max_len() {
                return Err(DatasetError::Contract(format!(
                    "{} {}: token rows of {} ids, expected {}",
                    w.ticker,
                    w.target_date,
                    w.tokens[0].len(),
                    tokenizer.max_len()
                )));
            }
            if w.graphs[0].shape() != image_shape {
                return Err(DatasetError::Contract(format!(
                    "{} {}: image shape {:?}, expected {:?}",
                    w.ticker,
                    w.target_date,
                    w.graphs[0].shape(),
                    image_shape
                )));
            }
            if let Some(id) = w
                .tokens
                .iter()
                .flatten()
                .find(|&&id| id as usize >= tokenizer.vocab_size())
            {
                return Err(DatasetError::Contract(format!("token id {id} outside vocabulary")));
            }
            label_counts[w.label as usize] += 1;
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            lag: build.lag,
            seq_len: tokenizer.max_len(),
            image_shape,
            normalization,
            label_counts,
            num_windows: windows.len(),
            vocab_size: tokenizer.vocab_size(),
            split,
            build: build.clone(),
            windows_crc32: crc32fast::hash(&windows_jsonl(&windows)?),
            vocab_crc32: crc32fast::hash(&vocab_json(&tokenizer)?),
        };
        Ok(Self {
            manifest,
            windows,
            tokenizer,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn windows(&self) -> &[LagWindow] {
        &self.windows
    }

    pub fn tokenizer(&self) -> &TokenizerSpec {
        &self.tokenizer
    }

    pub fn into_windows(self) -> Vec<LagWindow> {
        self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Re-derives the train/val/test partition from the stored date bounds.
    pub fn splits(&self) -> Result<Splits<LagWindow>> {
        let bounds = self
            .manifest
            .split
            .ok_or_else(|| DatasetError::Contract("dataset carries no split".into()))?;
        split_by_dates(self.windows.clone(), bounds.train_end, bounds.val_end)
    }
}

fn to_sorted_json(value: &impl Serialize) -> Result<Vec<u8>> {
    // going through Value sorts object keys
    let v: Value = serde_json::to_value(value)?;
    Ok(serde_json::to_vec_pretty(&v)?)
}

fn vocab_json(tokenizer: &TokenizerSpec) -> Result<Vec<u8>> {
    to_sorted_json(tokenizer)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowLine {
    ticker: String,
    target_date: NaiveDate,
    label: u8,
    lag_dates: Vec<NaiveDate>,
    macd: Vec<[f64; 5]>,
    tokens: Vec<Vec<u32>>,
}

fn windows_jsonl(windows: &[LagWindow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for w in windows {
        if w.macd.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DatasetError::Contract(format!(
                "{} {}: non-finite MACD value",
                w.ticker, w.target_date
            )));
        }
        let line = json!({
            "ticker": w.ticker,
            "target_date": w.target_date,
            "label": w.label,
            "lag_dates": w.lag_dates,
            "macd": w.macd,
            "tokens": w.tokens,
        });
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn graph_name(w: &LagWindow, i: usize) -> String {
    format!("{}_{}_{}.bin", w.ticker, w.target_date, i)
}

fn check_ticker(ticker: &str) -> Result<()> {
    let ok = !ticker.is_empty()
        && ticker != "."
        && ticker != ".."
        && ticker
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '^'));
    if ok {
        Ok(())
    } else {
        Err(DatasetError::Contract(format!(
            "ticker {ticker:?} is not a safe file name"
        )))
    }
}

/// Writes the dataset; an existing `graphs/` directory is replaced.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let graphs = dir.join("graphs");
    if graphs.exists() {
        fs::remove_dir_all(&graphs)?;
    }
    fs::create_dir_all(&graphs)?;
    for w in &ds.windows {
        check_ticker(&w.ticker)?;
        for (i, g) in w.graphs.iter().enumerate() {
            fs::write(graphs.join(graph_name(w, i)), encode_graph_blob(g))?;
        }
    }
    fs::write(dir.join("windows.jsonl"), windows_jsonl(&ds.windows)?)?;
    fs::write(dir.join("vocab.json"), vocab_json(&ds.tokenizer)?)?;
    fs::write(dir.join("manifest.json"), to_sorted_json(&ds.manifest)?)?;
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    Ok(fs::read(dir.join(name))?)
}

fn json_err(name: &str, e: serde_json::Error) -> DatasetError {
    if e.is_eof() {
        DatasetError::Truncated(name.to_string())
    } else {
        DatasetError::Format {
            path: name.to_string(),
            message: e.to_string(),
        }
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let raw = read(dir, "manifest.json")?;
    let value: Value = serde_json::from_slice(&raw).map_err(|e| json_err("manifest.json", e))?;
    let found = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| DatasetError::Format {
            path: "manifest.json".into(),
            message: "missing version".into(),
        })?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(DatasetError::Version {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| json_err("manifest.json", e))?;

    let vocab_bytes = read(dir, "vocab.json")?;
    if crc32fast::hash(&vocab_bytes) != manifest.vocab_crc32 {
        return Err(DatasetError::Checksum("vocab.json".into()));
    }
    let tokenizer: TokenizerSpec = serde_json::from_slice(&vocab_bytes).map_err(|e| json_err("vocab.json", e))?;
    let tokenizer = TokenizerSpec::new(
        tokenizer.vocab().clone(),
        tokenizer.vocab_size(),
        tokenizer.pad(),
        tokenizer.unk(),
        tokenizer.sep(),
        tokenizer.max_len(),
    )?;

    let lines = read(dir, "windows.jsonl")?;
    if crc32fast::hash(&lines) != manifest.windows_crc32 {
        return Err(DatasetError::Checksum("windows.jsonl".into()));
    }
    let mut windows = Vec::with_capacity(manifest.num_windows);
    for (i, line) in lines.split(|b| *b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: WindowLine = serde_json::from_slice(line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        check_ticker(&row.ticker)?;
        let mut w = LagWindow {
            ticker: row.ticker,
            target_date: row.target_date,
            lag_dates: row.lag_dates,
            macd: row.macd,
            tokens: row.tokens,
            graphs: Vec::new(),
            label: row.label,
        };
        for g in 0..w.macd.len() {
            let name = graph_name(&w, g);
            let bytes = fs::read(dir.join("graphs").join(&name))?;
            w.graphs.push(decode_graph_blob(&bytes, &name)?);
        }
        w.validate()?;
        windows.push(w);
    }
    if windows.len() != manifest.num_windows {
        return Err(DatasetError::Format {
            path: "windows.jsonl".into(),
            message: format!("{} windows, manifest says {}", windows.len(), manifest.num_windows),
        });
    }
    let mut counts = [0usize; 2];
    for w in &windows {
        counts[w.label as usize] += 1;
        if w.lag() != manifest.lag
            || w.tokens[0].len() != manifest.seq_len
            || w.graphs[0].shape() != manifest.image_shape
        {
            return Err(DatasetError::Format {
                path: "windows.jsonl".into(),
                message: format!("{} {} disagrees with the manifest shapes", w.ticker, w.target_date),
            });
        }
    }
    if counts != manifest.label_counts {
        return Err(DatasetError::Format {
            path: "manifest.json".into(),
            message: format!("label counts {counts:?} differ from stored {:?}", manifest.label_counts),
        });
    }
    Ok(Dataset {
        manifest,
        windows,
        tokenizer,
    })
}
