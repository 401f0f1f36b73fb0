//! Per-class averaged classification metrics and the leave-one-class-out
//! protocol.
//!
//! For every class `i` the four counts `TP_i, TN_i, FP_i, FN_i` are taken
//! one-vs-rest. Accuracy, F1 and precision are the unweighted means of the
//! per-class ratios; a class whose ratio has a zero denominator contributes 0.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::engine::MaskedModel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

/// `matrix[true][predicted]`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0; class_count]; class_count];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= class_count || y >= class_count {
            return Err(Error::InvalidArgument(format!("class index outside 0..{class_count}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

impl ConfusionCounts {
    pub fn from_matrix(m: &[Vec<usize>]) -> Self {
        let k = m.len();
        let total: usize = m.iter().flatten().sum();
        let per_class = (0..k)
            .map(|i| {
                let tp = m[i][i];
                let fn_ = m[i].iter().sum::<usize>() - tp;
                let fp = (0..k).map(|r| m[r][i]).sum::<usize>() - tp;
                ClassCounts {
                    tp,
                    fp,
                    fn_,
                    tn: total - tp - fp - fn_,
                }
            })
            .collect();
        ConfusionCounts { per_class }
    }

    pub fn from_predictions(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<Self> {
        Ok(Self::from_matrix(&confusion_matrix(predictions, labels, class_count)?))
    }

    pub fn class_count(&self) -> usize {
        self.per_class.len()
    }

    fn mean(&self, f: impl Fn(&ClassCounts) -> (usize, usize)) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .per_class
            .iter()
            .map(|c| {
                let (num, den) = f(c);
                if den == 0 {
                    0.0
                } else {
                    num as f64 / den as f64
                }
            })
            .sum();
        sum / self.per_class.len() as f64
    }
}

/// `(1/|A|) Σ (TP+TN)/(TP+TN+FP+FN)`
pub fn accuracy(c: &ConfusionCounts) -> f64 {
    c.mean(|k| (k.tp + k.tn, k.total()))
}

/// `(1/|A|) Σ 2TP/(2TP+FP+FN)`
pub fn f1(c: &ConfusionCounts) -> f64 {
    c.mean(|k| (2 * k.tp, 2 * k.tp + k.fp + k.fn_))
}

/// `(1/|A|) Σ TP/(TP+FP)`
pub fn precision(c: &ConfusionCounts) -> f64 {
    c.mean(|k| (k.tp, k.tp + k.fp))
}

/// Fraction of exactly correct predictions (not averaged per class).
pub fn micro_accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub micro_accuracy: f64,
    pub instances: usize,
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassCounts>,
}

impl MetricsReport {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<Self> {
        let confusion = confusion_matrix(predictions, labels, class_count)?;
        let counts = ConfusionCounts::from_matrix(&confusion);
        Ok(MetricsReport {
            accuracy: accuracy(&counts),
            f1: f1(&counts),
            precision: precision(&counts),
            micro_accuracy: micro_accuracy(predictions, labels),
            instances: labels.len(),
            confusion,
            per_class: counts.per_class,
        })
    }
}

pub fn evaluate(model: &MaskedModel, data: &Dataset) -> Result<MetricsReport> {
    let predictions = model.predict(&data.rows())?;
    MetricsReport::from_predictions(&predictions, data.labels(), data.class_count())
}

/// Trains with every instance of `class` (0-based) removed from `train` and
/// evaluates on the full `test` split.
pub fn leave_one_out<F>(train: &Dataset, test: &Dataset, class: usize, harness: F) -> Result<MetricsReport>
where
    F: FnOnce(&Dataset) -> Result<MaskedModel>,
{
    if train.class_count() < 3 {
        return Err(Error::InvalidArgument(
            "leave-one-out needs at least 3 classes".into(),
        ));
    }
    if class >= train.class_count() || train.class_counts()[class] == 0 {
        return Err(Error::Dataset(format!("class {} is absent from the training data", class + 1)));
    }
    let reduced = train.without_class(class)?;
    let model = harness(&reduced)?;
    evaluate(&model, test)
}
