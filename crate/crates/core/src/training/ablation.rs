use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::trainer::{evaluate, train, TrainConfig, TrainData};
use super::{Result, TrainError};
use crate::dataset::LagWindow;
use crate::fusion::{Modalities, Pooling};
use crate::model::{Meant, ModelConfig};

/// A named override of the base model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Modalities(Modalities),
    Pooling(Pooling),
    Lag(usize),
    Strict,
}

const LAGS: [usize; 3] = [1, 5, 10];

impl Variant {
    pub fn all() -> Vec<Variant> {
        let mut out: Vec<Variant> = Modalities::all_combinations()
            .into_iter()
            .rev()
            .map(Variant::Modalities)
            .collect();
        out.extend([Variant::Pooling(Pooling::MeanPool), Variant::Pooling(Pooling::SeqProj)]);
        out.extend(LAGS.map(Variant::Lag));
        out.push(Variant::Strict);
        out
    }

    pub fn valid_names() -> String {
        Variant::all()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match *self {
            Variant::Modalities(m) => cfg.fusion.modalities = m,
            Variant::Pooling(p) => cfg.fusion.pooling = p,
            Variant::Lag(l) => cfg.lag = l,
            Variant::Strict => cfg = cfg.strict(),
        }
        cfg
    }

    /// Parses a comma-separated list.
    pub fn parse_list(list: &str) -> Result<Vec<Variant>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Modalities(m) if m.text && m.image && m.price => f.write_str("full"),
            Variant::Modalities(m) => {
                let label = m.label();
                if label.contains('+') {
                    f.write_str(&label)
                } else {
                    write!(f, "{label}-only")
                }
            }
            Variant::Pooling(Pooling::MeanPool) => f.write_str("meanpool"),
            Variant::Pooling(Pooling::SeqProj) => f.write_str("seqproj"),
            Variant::Lag(l) => write!(f, "lag{l}"),
            Variant::Strict => f.write_str("strict"),
        }
    }
}

impl FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::all()
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| TrainError::UnknownVariant {
                name: s.to_string(),
                valid: Variant::valid_names(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub num_params: usize,
    pub best_epoch: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn shorten(windows: &[LagWindow], lag: usize) -> Result<Vec<LagWindow>> {
    windows
        .iter()
        .map(|w| w.truncated(lag).map_err(|e| TrainError::Mismatch(e.to_string())))
        .collect()
}

/// Trains every variant from the same seed and scores its best checkpoint
/// on `test`. Lag variants keep the most recent days of each window.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: TrainData<'_>,
    test: &[LagWindow],
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    if test.is_empty() {
        return Err(TrainError::Contract("ablation needs a non-empty test split".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.apply(base);
        let model = Meant::new(cfg.clone())?;
        let num_params = model.num_params();
        let (train_w, val_w, test_w);
        let (train_s, val_s, test_s) = if cfg.lag == base.lag {
            (data.train, data.val, test)
        } else {
            train_w = shorten(data.train, cfg.lag)?;
            val_w = shorten(data.val, cfg.lag)?;
            test_w = shorten(test, cfg.lag)?;
            (&train_w[..], &val_w[..], &test_w[..])
        };
        log::info!("ablation variant {v}: {num_params} parameters");
        let outcome = train(
            model,
            TrainData {
                train: train_s,
                val: val_s,
                stats: data.stats,
            },
            train_cfg,
            None,
        )?;
        let report = evaluate(&outcome.best, test_s, data.stats, train_cfg.batch_size)?;
        rows.push(AblationRow {
            variant: v.to_string(),
            num_params,
            best_epoch: outcome.best_epoch,
            accuracy: report.accuracy,
            macro_precision: report.macro_precision,
            macro_recall: report.macro_recall,
            macro_f1: report.macro_f1,
        });
    }
    Ok(rows)
}

/// Plain-text table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<14} {:>10} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
        "variant", "params", "epoch", "acc", "P", "R", "F1"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            r.variant, r.num_params, r.best_epoch, r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1
        ));
    }
    out
}
