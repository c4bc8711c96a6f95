//! Deterministic fixtures: sinusoidal price paths, generated tweets, and
//! windows whose label is a known function of the inputs.

use chrono::{Datelike, NaiveDate, Weekday};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{
    self, chronological_split, BuildConfig, Dataset, GraphImage, GraphSpec, LagWindow, MacdStats, SplitBounds,
    SplitFractions, TokenizerSpec, TweetRecord, PAD_ID, SEP_ID, UNK_ID,
};
use crate::indicators::{compute_macd, MacdParams, PriceSeries};

/// Sine-wave closes on consecutive weekdays starting at 2022-01-03.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidSpec {
    pub days: usize,
    pub period: f64,
    pub amplitude: f64,
    pub base: f64,
    pub phase: f64,
}

impl Default for SinusoidSpec {
    fn default() -> Self {
        Self {
            days: 300,
            period: 40.0,
            amplitude: 10.0,
            base: 100.0,
            phase: 0.0,
        }
    }
}

pub fn weekdays(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    start
        .iter_days()
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .take(n)
        .collect()
}

pub fn sinusoid_prices(ticker: &str, spec: &SinusoidSpec) -> PriceSeries {
    let start = NaiveDate::from_ymd_opt(2022, 1, 3).expect("valid date");
    let dates = weekdays(start, spec.days);
    let closes = (0..spec.days)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / spec.period + spec.phase;
            spec.base + spec.amplitude * x.sin()
        })
        .collect();
    PriceSeries::new(ticker, dates, closes).expect("sinusoid prices are valid")
}

const BULL: &[&str] = &["buy", "calls", "moon", "breakout", "long", "rally"];
const BEAR: &[&str] = &["sell", "puts", "dump", "breakdown", "short", "selloff"];
const FILLER: &[&str] = &[
    "the", "stock", "today", "market", "chart", "volume", "earnings", "watch",
];

/// `per_day` tweets on every trading day; the mood of each tweet leans with
/// the sign of that day's MACD histogram.
pub fn synthetic_tweets(prices: &PriceSeries, per_day: usize, seed: u64) -> Vec<TweetRecord> {
    let ind = compute_macd(prices, &MacdParams::default()).expect("finite prices");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(prices.len() * per_day);
    for (d, date) in prices.dates().iter().enumerate() {
        for _ in 0..per_day {
            let mood = if ind.histogram[d] >= 0.0 { BULL } else { BEAR };
            let words = rng.gen_range(3..8);
            let mut text: Vec<&str> = (0..words)
                .map(|_| *FILLER.choose(&mut rng).expect("non-empty"))
                .collect();
            text.push(mood.choose(&mut rng).expect("non-empty"));
            text.shuffle(&mut rng);
            let text = format!("${} {}", prices.ticker(), text.join(" "));
            out.push(TweetRecord::new(prices.ticker(), *date, text).expect("non-empty text"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparableSpec {
    pub lag: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub image: [usize; 3],
}

impl Default for SeparableSpec {
    fn default() -> Self {
        Self {
            lag: 2,
            seq_len: 4,
            vocab_size: 16,
            image: [3, 8, 8],
        }
    }
}

/// Balanced windows labeled 1 exactly when the histogram of the most recent
/// lag day is positive. Other features are noise.
pub fn separable_windows(n: usize, spec: &SeparableSpec, seed: u64) -> Vec<LagWindow> {
    assert!(spec.vocab_size > SEP_ID as usize + 1, "vocabulary too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(2023, 1, 2).expect("valid date");
    let days = weekdays(start, n + spec.lag);
    let [c, h, w] = spec.image;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut macd: Vec<[f64; 5]> = (0..spec.lag)
                .map(|_| std::array::from_fn(|_| normal(&mut rng)))
                .collect();
            let mag = 0.5 + rng.gen::<f64>();
            macd[spec.lag - 1][3] = if label == 1 { mag } else { -mag };
            let tokens = (0..spec.lag)
                .map(|_| {
                    let used = rng.gen_range(1..=spec.seq_len);
                    let mut row: Vec<u32> = (0..used)
                        .map(|_| rng.gen_range(SEP_ID + 1..spec.vocab_size as u32))
                        .collect();
                    row.resize(spec.seq_len, PAD_ID);
                    row
                })
                .collect();
            let graphs = (0..spec.lag)
                .map(|_| GraphImage {
                    channels: c,
                    height: h,
                    width: w,
                    data: (0..c * h * w).map(|_| rng.gen::<f32>()).collect(),
                })
                .collect();
            LagWindow {
                ticker: "SYN".into(),
                target_date: days[i + spec.lag],
                lag_dates: days[i..i + spec.lag].to_vec(),
                macd,
                tokens,
                graphs,
                label,
            }
        })
        .collect()
}

/// [`separable_windows`] packaged as a dataset with a chronological split,
/// identity normalization and placeholder vocabulary words `w3`, `w4`, ...
pub fn separable_dataset(n: usize, spec: &SeparableSpec, seed: u64, split: SplitFractions) -> dataset::Result<Dataset> {
    let vocab = (SEP_ID + 1..spec.vocab_size as u32)
        .map(|id| (format!("w{id}"), id))
        .collect();
    let tokenizer = TokenizerSpec::new(vocab, spec.vocab_size, PAD_ID, UNK_ID, SEP_ID, spec.seq_len)?;
    let build = BuildConfig {
        lag: spec.lag,
        seq_len: spec.seq_len,
        graph: GraphSpec::with_size(spec.image[2], spec.image[1]),
        split,
        ..BuildConfig::default()
    };
    let windows = separable_windows(n, spec, seed);
    let parts = chronological_split(windows.clone(), split)?;
    let last = |ws: &[LagWindow]| ws.iter().map(|w| w.target_date).max();
    let bounds = match (last(&parts.train), last(&parts.val)) {
        (Some(train_end), Some(val_end)) => Some(SplitBounds { train_end, val_end }),
        _ => None,
    };
    Dataset::new(windows, tokenizer, &build, MacdStats::identity(), bounds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weekdays_skip_weekends() {
        let d = weekdays(NaiveDate::from_ymd_opt(2022, 1, 7).unwrap(), 3);
        assert_eq!(d[1], NaiveDate::from_ymd_opt(2022, 1, 10).unwrap());
    }

    #[test]
    fn separable_labels_follow_last_histogram() {
        let ws = separable_windows(10, &SeparableSpec::default(), 1);
        for w in &ws {
            w.validate().unwrap();
            assert_eq!(w.label == 1, w.macd[w.lag() - 1][3] > 0.0);
        }
        assert_eq!(ws.iter().filter(|w| w.label == 1).count(), 5);
    }

    #[test]
    fn separable_dataset_splits_chronologically() {
        let ds = separable_dataset(20, &SeparableSpec::default(), 3, SplitFractions::default()).unwrap();
        let s = ds.splits().unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (16, 2, 2));
        assert_eq!(ds.manifest().vocab_size, 16);
    }

    #[test]
    fn tweets_are_seeded() {
        let p = sinusoid_prices(
            "AAA",
            &SinusoidSpec {
                days: 40,
                ..Default::default()
            },
        );
        assert_eq!(synthetic_tweets(&p, 2, 5), synthetic_tweets(&p, 2, 5));
        assert_eq!(synthetic_tweets(&p, 2, 5).len(), 80);
    }
}
