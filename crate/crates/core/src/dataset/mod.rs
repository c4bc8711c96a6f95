//! Labeled lag-window datasets: tweets, tokens, MACD graphs and persistence.

mod build;
mod graph;
mod labels;
mod split;
mod store;
mod tokenizer;
mod tweets;

pub use build::{build_dataset, build_lag_windows, BuildConfig, BuildStats, CalendarPolicy, LabelMode, WindowSet};
pub use graph::{decode_graph_blob, encode_graph_blob, render_macd_graph, write_ppm, GraphImage, GraphSpec};
pub use labels::{movement_ratio, stocknet_label};
pub use split::{chronological_split, chronological_split_by, split_by_dates, SplitFractions, Splits};
pub use store::{load_dataset, save_dataset, Dataset, MacdStats, Manifest, SplitBounds, FORMAT_VERSION};
pub use tokenizer::{tokenize, TokenizerSpec, PAD_ID, SEP_ID, SEP_TOKEN, UNK_ID};
pub use tweets::{concat_day_tweets, load_tweets_jsonl, read_tweets_jsonl, TweetRecord};

use chrono::NaiveDate;

use crate::indicators::IndicatorError;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file {0}")]
    Truncated(String),
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Indicator(#[from] IndicatorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One training example: `lag` antecedent days of MACD vectors, token ids
/// and graph images, oldest first, plus the label of the target day.
#[derive(Debug, Clone, PartialEq)]
pub struct LagWindow {
    pub ticker: String,
    pub target_date: NaiveDate,
    /// Trading dates of the lag days, oldest first.
    pub lag_dates: Vec<NaiveDate>,
    /// Raw `[EMA₁₂, EMA₂₆, signal, histogram, MACD]` rows.
    pub macd: Vec<[f64; 5]>,
    pub tokens: Vec<Vec<u32>>,
    pub graphs: Vec<GraphImage>,
    pub label: u8,
}

impl LagWindow {
    pub fn lag(&self) -> usize {
        self.macd.len()
    }

    /// Checks the structural invariants shared by every window.
    pub fn validate(&self) -> Result<()> {
        let l = self.macd.len();
        if l == 0 {
            return Err(DatasetError::Contract("window with zero lag days".into()));
        }
        if self.tokens.len() != l || self.graphs.len() != l || self.lag_dates.len() != l {
            return Err(DatasetError::Contract(format!(
                "{} {}: lag components disagree ({} macd, {} token rows, {} graphs, {} dates)",
                self.ticker,
                self.target_date,
                l,
                self.tokens.len(),
                self.graphs.len(),
                self.lag_dates.len()
            )));
        }
        let s = self.tokens[0].len();
        if self.tokens.iter().any(|t| t.len() != s) {
            return Err(DatasetError::Contract("token rows differ in length".into()));
        }
        let shape = self.graphs[0].shape();
        if self.graphs.iter().any(|g| g.shape() != shape) {
            return Err(DatasetError::Contract("graph images differ in shape".into()));
        }
        if self.label > 1 {
            return Err(DatasetError::Contract(format!("label {} not binary", self.label)));
        }
        Ok(())
    }

    /// Keeps only the most recent `lag` days.
    pub fn truncated(&self, lag: usize) -> Result<LagWindow> {
        if lag == 0 || lag > self.lag() {
            return Err(DatasetError::Contract(format!(
                "cannot shorten a {}-day window to {lag} days",
                self.lag()
            )));
        }
        let from = self.lag() - lag;
        Ok(LagWindow {
            ticker: self.ticker.clone(),
            target_date: self.target_date,
            lag_dates: self.lag_dates[from..].to_vec(),
            macd: self.macd[from..].to_vec(),
            tokens: self.tokens[from..].to_vec(),
            graphs: self.graphs[from..].to_vec(),
            label: self.label,
        })
    }
}
