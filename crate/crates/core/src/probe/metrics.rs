use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ProbeParams;
use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;

/// Evaluation summary. UA is the macro-average of recall over the classes
/// that occur in the evaluated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ua: f64,
    /// Recall per emotion; `None` for classes absent from the set.
    pub per_class_recall: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// 1-based epoch of the selected snapshot, when produced by training.
    pub epoch_of_best: Option<usize>,
}

pub fn metrics_from_predictions(predictions: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::dims("prediction count", labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= NUM_CLASSES || y >= NUM_CLASSES {
            return Err(Error::Validation(format!(
                "class index out of range: label {y}, prediction {p}"
            )));
        }
        confusion[y][p] += 1;
    }
    let per_class_recall: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let ua = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MetricsReport {
        ua,
        per_class_recall,
        confusion,
        epoch_of_best: None,
    })
}

/// Index of the largest entry per row; ties go to the lowest class index.
pub(crate) fn argmax_rows(logits: &DMatrix<f64>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn evaluate(params: &ProbeParams, features: &DMatrix<f64>, labels: &[usize]) -> Result<MetricsReport> {
    let logits = params.logits(features)?;
    metrics_from_predictions(&argmax_rows(&logits), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels: Vec<usize> = (0..12).map(|i| i % 6).collect();
        let m = metrics_from_predictions(&labels, &labels).unwrap();
        assert_eq!(m.ua, 1.0);
        for (i, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), row[i]);
        }
    }

    #[test]
    fn two_classes_present() {
        // class 0 all right, class 1 half right
        let labels = [0, 0, 1, 1];
        let preds = [0, 0, 1, 0];
        let m = metrics_from_predictions(&preds, &labels).unwrap();
        assert_eq!(m.ua, 0.75);
        assert_eq!(m.per_class_recall[2], None);
        assert_eq!(m.confusion[1], vec![1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn constant_prediction_is_chance() {
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let m = metrics_from_predictions(&vec![0; 60], &labels).unwrap();
        assert!((m.ua - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn zero_probe_predicts_class_zero() {
        let p = ProbeParams::zeros(2);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = evaluate(&p, &x, &[0, 1, 2]).unwrap();
        assert_eq!(m.confusion[1][0], 1);
        assert!((m.ua - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ua_is_mean_of_recalls_and_rows_match_counts() {
        let labels = [0, 1, 1, 2, 2, 2, 3, 4, 5, 5];
        let preds = [0, 2, 1, 2, 0, 2, 3, 3, 5, 1];
        let m = metrics_from_predictions(&preds, &labels).unwrap();
        let recalls: Vec<f64> = m.per_class_recall.iter().flatten().copied().collect();
        assert_eq!(m.ua, recalls.iter().sum::<f64>() / recalls.len() as f64);
        for c in 0..6 {
            let count = labels.iter().filter(|&&y| y == c).count();
            assert_eq!(m.confusion[c].iter().sum::<usize>(), count);
        }
    }

    #[test]
    fn empty_set_errors() {
        assert!(metrics_from_predictions(&[], &[]).is_err());
    }
}
