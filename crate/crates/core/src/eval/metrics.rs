//! Binary classification metrics with **safe as the positive class**.
//!
//! That orientation makes the false-positive rate the fraction of truly
//! dangerous samples that were predicted safe, which is the error that
//! matters for a road-safety map. It is the reverse of the usual
//! "positive = the thing being detected" convention, so read `tp`/`fp`
//! accordingly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Label;

/// Counts of a safe-positive confusion matrix. `abstain_safe` and
/// `abstain_dangerous` count samples of each true class for which no
/// prediction was made; they are wrong for accuracy and recall purposes but
/// are neither predicted positives nor predicted negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    #[serde(default)]
    pub abstain_safe: u64,
    #[serde(default)]
    pub abstain_dangerous: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted: Option<Label>, actual: Label) {
        match (predicted, actual) {
            (Some(Label::Safe), Label::Safe) => self.tp += 1,
            (Some(Label::Safe), Label::Dangerous) => self.fp += 1,
            (Some(Label::Dangerous), Label::Dangerous) => self.tn += 1,
            (Some(Label::Dangerous), Label::Safe) => self.fn_ += 1,
            (None, Label::Safe) => self.abstain_safe += 1,
            (None, Label::Dangerous) => self.abstain_dangerous += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_ + self.abstain_safe + self.abstain_dangerous
    }

    pub fn actual_safe(&self) -> u64 {
        self.tp + self.fn_ + self.abstain_safe
    }

    pub fn actual_dangerous(&self) -> u64 {
        self.fp + self.tn + self.abstain_dangerous
    }
}

/// Set when a ratio had a zero denominator and was reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub fpr: bool,
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Dangerous predicted safe over all dangerous.
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub undefined: UndefinedFlags,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        if c.total() == 0 {
            return Err(Error::Data("metrics need at least one sample".into()));
        }
        let mut u = UndefinedFlags::default();
        let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
        let fpr = ratio(c.fp, c.actual_dangerous(), &mut u.fpr);
        let precision = ratio(c.tp, c.tp + c.fp, &mut u.precision);
        let recall = ratio(c.tp, c.actual_safe(), &mut u.recall);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            u.f1 = true;
            0.0
        };
        Ok(Self {
            accuracy,
            fpr,
            precision,
            recall,
            f1,
            confusion: c,
            undefined: u,
        })
    }
}

/// Metrics of predictions against labels.
pub fn metrics(predictions: &[Label], labels: &[Label]) -> Result<Metrics> {
    let preds: Vec<Option<Label>> = predictions.iter().map(|p| Some(*p)).collect();
    metrics_with_abstentions(&preds, labels)
}

/// Like [`metrics`], with `None` marking an abstention.
pub fn metrics_with_abstentions(predictions: &[Option<Label>], labels: &[Label]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (p, l) in predictions.iter().zip(labels) {
        c.add(*p, *l);
    }
    Metrics::from_confusion(c)
}

/// Convenience for class indices (0 = safe, 1 = dangerous).
pub fn metrics_from_indices(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    let conv = |v: &[usize]| -> Result<Vec<Label>> {
        v.iter()
            .map(|&i| Label::from_index(i).ok_or_else(|| Error::Data(format!("class index {i} is not a label"))))
            .collect()
    };
    metrics(&conv(predictions)?, &conv(labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;

    #[test]
    fn fpr_definition() {
        let mut preds = vec![Safe; 10];
        let mut labels = vec![Safe; 10];
        labels.extend([Dangerous; 10]);
        preds.extend([Safe; 3]);
        preds.extend([Dangerous; 7]);
        let m = metrics(&preds, &labels).unwrap();
        assert_eq!(m.fpr, 0.3);
        assert_eq!(m.confusion.fp, 3);
    }

    #[test]
    fn perfect_predictions() {
        let l = [Safe, Dangerous, Safe];
        let m = metrics(&l, &l).unwrap();
        assert_eq!((m.accuracy, m.fpr, m.f1), (1.0, 0.0, 1.0));
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let m = metrics(&[Dangerous], &[Dangerous]).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.undefined.precision && m.undefined.recall && m.undefined.f1);
        assert!(!m.undefined.fpr);
        assert!(metrics(&[], &[]).is_err());
        assert!(metrics(&[Safe], &[]).is_err());
    }
}
