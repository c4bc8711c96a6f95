//! EMA/MACD indicator math and the signal-cross classifier used for labels.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IndicatorError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("day index {index} out of range for {len} days")]
    Index { index: usize, len: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IndicatorError>;

/// Daily closing prices for one ticker.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    ticker: String,
    dates: Vec<NaiveDate>,
    closes: Vec<f64>,
}

impl PriceSeries {
    pub fn new(ticker: impl Into<String>, dates: Vec<NaiveDate>, closes: Vec<f64>) -> Result<Self> {
        let ticker = ticker.into();
        if dates.len() != closes.len() {
            return Err(IndicatorError::Contract(format!(
                "{ticker}: {} dates but {} closes",
                dates.len(),
                closes.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(IndicatorError::Contract(format!(
                "{ticker}: dates not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        if let Some(c) = closes.iter().find(|c| !c.is_finite() || **c <= 0.0) {
            return Err(IndicatorError::Contract(format!(
                "{ticker}: close {c} is not a positive finite price"
            )));
        }
        Ok(Self { ticker, dates, closes })
    }

    pub fn ticker(&self) -> &str {
        &self.ticker
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }

    pub fn len(&self) -> usize {
        self.closes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closes.is_empty()
    }
}

/// How the smoothing factor of an EMA is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// `α = 2/(period+1)` for every day.
    #[default]
    Period,
    /// `α = 2/(t+1)` with `t` the 1-based day number, ignoring the period.
    DayIndex,
}

/// Exponential moving average seeded with the first value.
pub fn ema(values: &[f64], period: usize) -> Result<Vec<f64>> {
    ema_with(values, period, AlphaMode::Period)
}

pub fn ema_with(values: &[f64], period: usize, mode: AlphaMode) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(IndicatorError::Contract("ema of an empty series".into()));
    }
    if period == 0 {
        return Err(IndicatorError::Contract("ema period must be >= 1".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(IndicatorError::Numeric(format!("non-finite input {v}")));
    }
    let mut out = Vec::with_capacity(values.len());
    out.push(values[0]);
    for (i, &y) in values.iter().enumerate().skip(1) {
        let alpha = match mode {
            AlphaMode::Period => 2.0 / (period as f64 + 1.0),
            AlphaMode::DayIndex => 2.0 / (i as f64 + 2.0),
        };
        let prev = out[i - 1];
        out.push((1.0 - alpha) * prev + alpha * y);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacdParams {
    pub fast: usize,
    pub slow: usize,
    pub signal: usize,
    pub alpha_mode: AlphaMode,
}

impl Default for MacdParams {
    fn default() -> Self {
        Self {
            fast: 12,
            slow: 26,
            signal: 9,
            alpha_mode: AlphaMode::Period,
        }
    }
}

/// Per-day EMA₁₂, EMA₂₆, MACD line, signal line and histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSeries {
    pub dates: Vec<NaiveDate>,
    pub ema_fast: Vec<f64>,
    pub ema_slow: Vec<f64>,
    pub macd: Vec<f64>,
    pub signal: Vec<f64>,
    pub histogram: Vec<f64>,
}

impl IndicatorSeries {
    /// Assembles a series from the two EMAs and a signal line; MACD and
    /// histogram are derived so `m = fast − slow` and `h = m − s` hold exactly.
    pub fn from_parts(dates: Vec<NaiveDate>, ema_fast: Vec<f64>, ema_slow: Vec<f64>, signal: Vec<f64>) -> Result<Self> {
        let n = dates.len();
        if ema_fast.len() != n || ema_slow.len() != n || signal.len() != n {
            return Err(IndicatorError::Contract("indicator columns differ in length".into()));
        }
        let macd: Vec<f64> = ema_fast.iter().zip(&ema_slow).map(|(f, s)| f - s).collect();
        let histogram = macd.iter().zip(&signal).map(|(m, s)| m - s).collect();
        Ok(Self {
            dates,
            ema_fast,
            ema_slow,
            macd,
            signal,
            histogram,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// `[EMA₁₂, EMA₂₆, signal, histogram, MACD]` for one day.
    pub fn macd_vector(&self, day: usize) -> Result<[f64; 5]> {
        if day >= self.len() {
            return Err(IndicatorError::Index {
                index: day,
                len: self.len(),
            });
        }
        Ok([
            self.ema_fast[day],
            self.ema_slow[day],
            self.signal[day],
            self.histogram[day],
            self.macd[day],
        ])
    }
}

pub fn compute_macd(prices: &PriceSeries, params: &MacdParams) -> Result<IndicatorSeries> {
    let closes = prices.closes();
    let fast = ema_with(closes, params.fast, params.alpha_mode)?;
    let slow = ema_with(closes, params.slow, params.alpha_mode)?;
    let macd: Vec<f64> = fast.iter().zip(&slow).map(|(f, s)| f - s).collect();
    let signal = ema_with(&macd, params.signal, params.alpha_mode)?;
    IndicatorSeries::from_parts(prices.dates().to_vec(), fast, slow, signal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossSignal {
    Positive,
    Negative,
    None,
}

impl CrossSignal {
    /// Binary class: 1 for a bullish cross, 0 for a bearish one.
    pub fn label(self) -> Option<u8> {
        match self {
            CrossSignal::Positive => Some(1),
            CrossSignal::Negative => Some(0),
            CrossSignal::None => None,
        }
    }
}

/// Cross rule on raw values; any equality yields [`CrossSignal::None`].
pub fn crossover(m_prev: f64, s_prev: f64, m_now: f64, s_now: f64) -> CrossSignal {
    if m_prev < s_prev && m_now > s_now {
        CrossSignal::Positive
    } else if m_prev > s_prev && m_now < s_now {
        CrossSignal::Negative
    } else {
        CrossSignal::None
    }
}

/// Classifies day `t` by comparing MACD and signal on `t−1` and `t`.
pub fn classify_crossover(ind: &IndicatorSeries, t: usize) -> Result<CrossSignal> {
    if t == 0 || t >= ind.len() {
        return Err(IndicatorError::Index {
            index: t,
            len: ind.len(),
        });
    }
    Ok(crossover(
        ind.macd[t - 1],
        ind.signal[t - 1],
        ind.macd[t],
        ind.signal[t],
    ))
}

#[derive(Debug, Deserialize)]
struct PriceRow {
    ticker: String,
    date: String,
    close: f64,
}

/// Reads `ticker,date,close` rows; series come back sorted by ticker and date.
pub fn read_prices_csv<R: Read>(reader: R) -> Result<Vec<PriceSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IndicatorError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["ticker", "date", "close"] {
        return Err(IndicatorError::Parse {
            line: 1,
            message: format!("expected header ticker,date,close, got {:?}", headers),
        });
    }
    let mut grouped: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<PriceRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| IndicatorError::Parse {
            line,
            message: e.to_string(),
        })?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d").map_err(|e| IndicatorError::Parse {
            line,
            message: format!("bad date {:?}: {e}", row.date),
        })?;
        if !row.close.is_finite() || row.close <= 0.0 {
            return Err(IndicatorError::Parse {
                line,
                message: format!("close {} is not a positive price", row.close),
            });
        }
        grouped.entry(row.ticker).or_default().push((date, row.close));
    }
    grouped
        .into_iter()
        .map(|(ticker, mut rows)| {
            rows.sort_by_key(|r| r.0);
            let (dates, closes) = rows.into_iter().unzip();
            PriceSeries::new(ticker, dates, closes)
        })
        .collect()
}

pub fn load_prices_csv(path: &Path) -> Result<Vec<PriceSeries>> {
    read_prices_csv(std::fs::File::open(path)?)
}

pub fn write_prices_csv<W: std::io::Write>(series: &[PriceSeries], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| IndicatorError::Io(std::io::Error::other(e));
    w.write_record(["ticker", "date", "close"]).map_err(err)?;
    for s in series {
        for (d, c) in s.dates().iter().zip(s.closes()) {
            w.write_record([s.ticker(), &d.format("%Y-%m-%d").to_string(), &c.to_string()])
                .map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}
