use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{render_macd_graph, GraphImage, GraphSpec};
use super::labels::stocknet_label;
use super::split::{chronological_split_by, SplitFractions};
use super::store::{Dataset, MacdStats, SplitBounds};
use super::tokenizer::{tokenize, TokenizerSpec};
use super::tweets::{concat_day_tweets, TweetRecord};
use super::{DatasetError, LagWindow, Result};
use crate::indicators::{classify_crossover, compute_macd, IndicatorSeries, MacdParams, PriceSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Label from the MACD/signal cross on the target day.
    #[default]
    Crossover,
    /// Label from the close-to-close movement ratio with the ambiguity band removed.
    Stocknet,
}

/// How tweets dated on non-trading days are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalendarPolicy {
    #[default]
    Exact,
    /// Move onto the next trading day.
    FoldForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub lag: usize,
    pub label_mode: LabelMode,
    pub macd: MacdParams,
    pub graph: GraphSpec,
    pub min_tweets_per_day: usize,
    pub calendar: CalendarPolicy,
    pub seq_len: usize,
    pub vocab_cap: usize,
    pub split: SplitFractions,
    pub parallel: bool,
    /// Recorded in the manifest; building itself draws no random numbers.
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            lag: 5,
            label_mode: LabelMode::Crossover,
            macd: MacdParams::default(),
            graph: GraphSpec::default(),
            min_tweets_per_day: 1,
            calendar: CalendarPolicy::Exact,
            seq_len: 128,
            vocab_cap: 20_000,
            split: SplitFractions::default(),
            parallel: true,
            seed: 42,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lag == 0 {
            return Err(DatasetError::Contract("lag must be >= 1".into()));
        }
        if self.seq_len == 0 {
            return Err(DatasetError::Contract("sequence length must be >= 1".into()));
        }
        self.graph.validate()?;
        self.split.validate()
    }

    /// First target-day index for which every lag day has a full graph window.
    pub fn first_target(&self) -> usize {
        self.lag + self.graph.window_days - 1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub candidates: usize,
    /// No crossover (or inside the movement band) on the target day.
    pub discarded_no_signal: usize,
    pub discarded_sparse_tweets: usize,
    pub label_counts: [usize; 2],
    pub tweets_off_calendar: usize,
    pub skipped_tickers: Vec<String>,
    pub warnings: Vec<String>,
}

impl BuildStats {
    fn merge(&mut self, other: BuildStats) {
        self.candidates += other.candidates;
        self.discarded_no_signal += other.discarded_no_signal;
        self.discarded_sparse_tweets += other.discarded_sparse_tweets;
        self.label_counts[0] += other.label_counts[0];
        self.label_counts[1] += other.label_counts[1];
        self.tweets_off_calendar += other.tweets_off_calendar;
        self.skipped_tickers.extend(other.skipped_tickers);
        self.warnings.extend(other.warnings);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<LagWindow>,
    pub stats: BuildStats,
}

/// A window before tokenization: lag-day texts instead of ids.
struct RawWindow {
    ticker: String,
    target_date: NaiveDate,
    lag_dates: Vec<NaiveDate>,
    macd: Vec<[f64; 5]>,
    texts: Vec<String>,
    graphs: Vec<GraphImage>,
    label: u8,
}

impl RawWindow {
    fn tokenized(self, tokenizer: &TokenizerSpec) -> LagWindow {
        LagWindow {
            tokens: self.texts.iter().map(|t| tokenize(t, tokenizer)).collect(),
            ticker: self.ticker,
            target_date: self.target_date,
            lag_dates: self.lag_dates,
            macd: self.macd,
            graphs: self.graphs,
            label: self.label,
        }
    }
}

type DayTweets<'a> = BTreeMap<usize, Vec<&'a TweetRecord>>;

fn ticker_windows(
    prices: &PriceSeries,
    tweets: &[&TweetRecord],
    config: &BuildConfig,
) -> Result<(Vec<RawWindow>, BuildStats)> {
    let mut stats = BuildStats::default();
    let ind = compute_macd(prices, &config.macd)?;
    let dates = prices.dates();

    let mut by_day: DayTweets = BTreeMap::new();
    for tw in tweets {
        let day = match dates.binary_search(&tw.date) {
            Ok(i) => Some(i),
            Err(i) if config.calendar == CalendarPolicy::FoldForward && i < dates.len() => Some(i),
            Err(_) => None,
        };
        match day {
            Some(i) => by_day.entry(i).or_default().push(tw),
            None => stats.tweets_off_calendar += 1,
        }
    }

    let first = config.first_target();
    if ind.len() <= first {
        stats.warnings.push(format!(
            "{}: {} price days cannot cover a {}-day lag with {}-day graphs",
            prices.ticker(),
            ind.len(),
            config.lag,
            config.graph.window_days
        ));
        return Ok((Vec::new(), stats));
    }

    let mut graph_cache: HashMap<usize, GraphImage> = HashMap::new();
    let mut out = Vec::new();
    for t in first..ind.len() {
        stats.candidates += 1;
        let label = match config.label_mode {
            LabelMode::Crossover => classify_crossover(&ind, t)?.label(),
            LabelMode::Stocknet => stocknet_label(prices.closes()[t - 1], prices.closes()[t])?,
        };
        let Some(label) = label else {
            stats.discarded_no_signal += 1;
            continue;
        };
        let lag_days: Vec<usize> = (t - config.lag..t).collect();
        let sparse = lag_days
            .iter()
            .any(|d| by_day.get(d).map_or(0, Vec::len) < config.min_tweets_per_day.max(1));
        if sparse {
            stats.discarded_sparse_tweets += 1;
            continue;
        }
        out.push(assemble(
            &ind,
            &by_day,
            &lag_days,
            t,
            label,
            config,
            &mut graph_cache,
            prices.ticker(),
        )?);
        stats.label_counts[label as usize] += 1;
    }
    Ok((out, stats))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    ind: &IndicatorSeries,
    by_day: &DayTweets,
    lag_days: &[usize],
    t: usize,
    label: u8,
    config: &BuildConfig,
    cache: &mut HashMap<usize, GraphImage>,
    ticker: &str,
) -> Result<RawWindow> {
    let mut macd = Vec::with_capacity(lag_days.len());
    let mut texts = Vec::with_capacity(lag_days.len());
    let mut graphs = Vec::with_capacity(lag_days.len());
    for &d in lag_days {
        macd.push(ind.macd_vector(d)?);
        // records on a folded day may carry an earlier calendar date
        let day: Vec<TweetRecord> = by_day[&d]
            .iter()
            .map(|tw| TweetRecord {
                date: ind.dates[d],
                ..(*tw).clone()
            })
            .collect();
        texts.push(concat_day_tweets(&day)?);
        let img = match cache.get(&d) {
            Some(img) => img.clone(),
            None => {
                let img = render_macd_graph(ind, d, &config.graph)?;
                cache.insert(d, img.clone());
                img
            }
        };
        graphs.push(img);
    }
    Ok(RawWindow {
        ticker: ticker.to_string(),
        target_date: ind.dates[t],
        lag_dates: lag_days.iter().map(|&d| ind.dates[d]).collect(),
        macd,
        texts,
        graphs,
        label,
    })
}

fn raw_windows(
    prices: &[PriceSeries],
    tweets: &[TweetRecord],
    config: &BuildConfig,
) -> Result<(Vec<RawWindow>, BuildStats)> {
    config.validate()?;
    let mut by_ticker: BTreeMap<&str, &PriceSeries> = BTreeMap::new();
    for p in prices {
        if by_ticker.insert(p.ticker(), p).is_some() {
            return Err(DatasetError::Contract(format!(
                "duplicate price series for {}",
                p.ticker()
            )));
        }
    }
    let mut tweet_groups: BTreeMap<&str, Vec<&TweetRecord>> = BTreeMap::new();
    for tw in tweets {
        tweet_groups.entry(tw.ticker.as_str()).or_default().push(tw);
    }

    let mut stats = BuildStats::default();
    for (ticker, group) in &tweet_groups {
        if !by_ticker.contains_key(ticker) {
            log::warn!("no price coverage for {ticker}; skipping {} tweets", group.len());
            stats.skipped_tickers.push(ticker.to_string());
            stats
                .warnings
                .push(format!("{ticker}: {} tweets without price coverage", group.len()));
        }
    }

    let jobs: Vec<(&PriceSeries, Vec<&TweetRecord>)> = by_ticker
        .values()
        .map(|p| (*p, tweet_groups.get(p.ticker()).cloned().unwrap_or_default()))
        .collect();
    let run = |(p, tw): &(&PriceSeries, Vec<&TweetRecord>)| ticker_windows(p, tw, config);
    let results: Vec<Result<(Vec<RawWindow>, BuildStats)>> = if config.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };

    let mut windows = Vec::new();
    for r in results {
        let (w, s) = r?;
        windows.extend(w);
        stats.merge(s);
    }
    windows.sort_by(|a, b| (&a.ticker, a.target_date).cmp(&(&b.ticker, b.target_date)));
    stats.skipped_tickers.sort();
    stats.warnings.sort();
    Ok((windows, stats))
}

/// Labeled windows for every ticker, tokenized with a caller-supplied
/// vocabulary, sorted by `(ticker, target_date)`.
pub fn build_lag_windows(
    prices: &[PriceSeries],
    tweets: &[TweetRecord],
    tokenizer: &TokenizerSpec,
    config: &BuildConfig,
) -> Result<WindowSet> {
    if tokenizer.max_len() != config.seq_len {
        return Err(DatasetError::Contract(format!(
            "tokenizer length {} differs from configured {}",
            tokenizer.max_len(),
            config.seq_len
        )));
    }
    let (raw, stats) = raw_windows(prices, tweets, config)?;
    let windows = raw.into_iter().map(|w| w.tokenized(tokenizer)).collect();
    Ok(WindowSet { windows, stats })
}

/// Full pipeline: windows, chronological split, a vocabulary drawn from the
/// training texts only, and MACD normalization from the training rows.
pub fn build_dataset(
    prices: &[PriceSeries],
    tweets: &[TweetRecord],
    config: &BuildConfig,
) -> Result<(Dataset, BuildStats)> {
    let (raw, stats) = raw_windows(prices, tweets, config)?;
    if raw.is_empty() {
        let tokenizer = TokenizerSpec::from_corpus(std::iter::empty(), config.vocab_cap, config.seq_len)?;
        let ds = Dataset::new(Vec::new(), tokenizer, config, MacdStats::identity(), None)?;
        return Ok((ds, stats));
    }
    let splits = chronological_split_by(raw, |w| w.target_date, config.split)?;
    let bounds = SplitBounds {
        train_end: splits
            .train
            .iter()
            .map(|w| w.target_date)
            .max()
            .expect("non-empty split"),
        val_end: splits.val.iter().map(|w| w.target_date).max().expect("non-empty split"),
    };
    let tokenizer = TokenizerSpec::from_corpus(
        splits.train.iter().flat_map(|w| w.texts.iter().map(String::as_str)),
        config.vocab_cap,
        config.seq_len,
    )?;
    let norm = MacdStats::from_rows(splits.train.iter().flat_map(|w| w.macd.iter()));
    let mut windows: Vec<LagWindow> = [splits.train, splits.val, splits.test]
        .into_iter()
        .flatten()
        .map(|w| w.tokenized(&tokenizer))
        .collect();
    windows.sort_by(|a, b| (&a.ticker, a.target_date).cmp(&(&b.ticker, b.target_date)));
    let ds = Dataset::new(windows, tokenizer, config, norm, Some(bounds))?;
    Ok((ds, stats))
}
