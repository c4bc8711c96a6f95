use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{DatasetError, LagWindow, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| f.is_nan() || *f <= 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Contract(format!(
                "split fractions {parts:?} must be positive and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Moves a cut backwards until it no longer separates two equal dates.
fn settle(dates: &[NaiveDate], mut cut: usize) -> usize {
    while cut > 0 && cut < dates.len() && dates[cut - 1] == dates[cut] {
        cut -= 1;
    }
    cut
}

/// Contiguous chronological train/val/test slices; a date straddling a
/// boundary moves wholly into the later split.
pub fn chronological_split_by<T>(
    mut items: Vec<T>,
    date_of: impl Fn(&T) -> NaiveDate,
    fractions: SplitFractions,
) -> Result<Splits<T>> {
    fractions.validate()?;
    items.sort_by_key(|w| date_of(w));
    let dates: Vec<NaiveDate> = items.iter().map(&date_of).collect();
    let n = items.len();
    let c1 = settle(&dates, (n as f64 * fractions.train).round() as usize);
    let c2 = settle(&dates, (n as f64 * (fractions.train + fractions.val)).round() as usize);
    if c1 == 0 || c2 <= c1 || c2 >= n {
        return Err(DatasetError::Contract(format!(
            "{n} windows over {} distinct dates cannot fill three disjoint splits",
            {
                let mut d = dates.clone();
                d.dedup();
                d.len()
            }
        )));
    }
    let test = items.split_off(c2);
    let val = items.split_off(c1);
    Ok(Splits {
        train: items,
        val,
        test,
    })
}

pub fn chronological_split(windows: Vec<LagWindow>, fractions: SplitFractions) -> Result<Splits<LagWindow>> {
    chronological_split_by(windows, |w| w.target_date, fractions)
}

/// Train takes dates `<= train_end`, validation `(train_end, val_end]`, test the rest.
pub fn split_by_dates(windows: Vec<LagWindow>, train_end: NaiveDate, val_end: NaiveDate) -> Result<Splits<LagWindow>> {
    if val_end <= train_end {
        return Err(DatasetError::Contract("validation end must follow training end".into()));
    }
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut windows = windows;
    windows.sort_by_key(|w| w.target_date);
    for w in windows {
        match w.target_date {
            d if d <= train_end => splits.train.push(w),
            d if d <= val_end => splits.val.push(w),
            _ => splits.test.push(w),
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(i: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2023, 1, 1).unwrap() + chrono::Duration::days(i)
    }

    #[test]
    fn exact_division() {
        let items: Vec<i64> = (0..10).collect();
        let s = chronological_split_by(items, |i| d(*i), SplitFractions::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn single_date_is_rejected() {
        let items = vec![0i64; 10];
        assert!(chronological_split_by(items, |i| d(*i), SplitFractions::default()).is_err());
    }

    #[test]
    fn ties_move_into_later_split() {
        // dates: 0..7, then 7,7,8 -> the train cut at 8 would split date 7
        let items: Vec<i64> = vec![0, 1, 2, 3, 4, 5, 6, 7, 7, 8];
        let s = chronological_split_by(items, |i| d(*i), SplitFractions::default()).unwrap();
        assert_eq!(s.train.len(), 7);
        assert_eq!(s.val, vec![7, 7]);
        assert_eq!(s.test, vec![8]);
    }

    #[test]
    fn fractions_validated() {
        let bad = SplitFractions {
            train: 0.9,
            val: 0.1,
            test: 0.1,
        };
        assert!(bad.validate().is_err());
        let zero = SplitFractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        assert!(zero.validate().is_err());
    }
}
