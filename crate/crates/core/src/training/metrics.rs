use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binary classification summary. `confusion[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub per_class: [ClassMetrics; 2],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: [[usize; 2]; 2],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(preds: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(TrainError::Contract("metrics of an empty prediction set".into()));
    }
    if preds.len() != labels.len() {
        return Err(TrainError::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&p, &y) in preds.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(TrainError::Contract(format!(
                "class ids must be 0 or 1, got {p} and {y}"
            )));
        }
        confusion[y][p] += 1;
    }
    let per_class: [ClassMetrics; 2] = std::array::from_fn(|c| {
        let tp = confusion[c][c];
        let precision = ratio(tp, confusion[0][c] + confusion[1][c]);
        let recall = ratio(tp, confusion[c][0] + confusion[c][1]);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics { precision, recall, f1 }
    });
    let mean = |f: fn(&ClassMetrics) -> f64| (f(&per_class[0]) + f(&per_class[1])) / 2.0;
    Ok(MetricsReport {
        samples: preds.len(),
        accuracy: ratio(confusion[0][0] + confusion[1][1], preds.len()),
        per_class,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        confusion,
    })
}

impl MetricsReport {
    /// Rows are true classes, columns predicted classes.
    pub fn confusion_csv(&self) -> String {
        let c = &self.confusion;
        format!("true\\pred,0,1\n0,{},{}\n1,{},{}\n", c[0][0], c[0][1], c[1][0], c[1][1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored value has failed to improve for `patience`
/// consecutive observations. The first observation always improves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> StopDecision {
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_over_zero_is_zero() {
        let r = compute_metrics(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(r.per_class[1], ClassMetrics::default());
        assert_eq!(r.per_class[0].f1, 1.0);
        assert_eq!(r.macro_f1, 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[0], &[0, 1]).is_err());
        assert!(compute_metrics(&[2], &[0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = compute_metrics(&[1, 1, 0], &[1, 0, 0]).unwrap();
        assert_eq!(r.confusion_csv(), "true\\pred,0,1\n0,1,1\n1,0,1\n");
    }
}
