//! Ranking and classification metrics under a single relevant label.
//!
//! AP@k reduces to the truncated reciprocal rank of the true label. F1@3
//! treats the top three predictions as retrieved and the true label as the
//! only relevant item, so a hit scores `2 * (1/3) * 1 / (1/3 + 1) = 0.5`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProbDist;
use crate::selection::rank_of_label;

/// Per-sample F1 when the true label is inside the top three.
pub const F1_AT_3_HIT: f64 = 0.5;

/// Pairs listed in rendered comparisons.
pub const TOP_CONFUSED: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfusedPair {
    pub true_label: usize,
    pub predicted: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map_at_3: f64,
    pub map_at_10: f64,
    pub accuracy: f64,
    pub f1_at_3: f64,
    pub n: usize,
    /// Indexed by true class.
    pub per_class_errors: Vec<usize>,
    /// Count descending, then `(true, predicted)` ascending.
    pub top_confused_pairs: Vec<ConfusedPair>,
}

/// The four headline metrics, used for means and standard deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub map_at_3: f64,
    pub map_at_10: f64,
    pub accuracy: f64,
    pub f1_at_3: f64,
}

impl MetricValues {
    fn as_array(&self) -> [f64; 4] {
        [self.map_at_3, self.map_at_10, self.accuracy, self.f1_at_3]
    }

    fn from_array(v: [f64; 4]) -> Self {
        MetricValues {
            map_at_3: v[0],
            map_at_10: v[1],
            accuracy: v[2],
            f1_at_3: v[3],
        }
    }
}

impl MetricsReport {
    pub fn values(&self) -> MetricValues {
        MetricValues {
            map_at_3: self.map_at_3,
            map_at_10: self.map_at_10,
            accuracy: self.accuracy,
            f1_at_3: self.f1_at_3,
        }
    }

    pub const CSV_HEADER: [&'static str; 5] = ["map_at_3", "map_at_10", "accuracy", "f1_at_3", "n"];

    pub fn csv_row(&self) -> [String; 5] {
        [
            self.map_at_3.to_string(),
            self.map_at_10.to_string(),
            self.accuracy.to_string(),
            self.f1_at_3.to_string(),
            self.n.to_string(),
        ]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::CSV_HEADER)?;
        w.write_record(self.csv_row())?;
        w.flush()?;
        Ok(())
    }

    pub fn errors(&self) -> usize {
        self.per_class_errors.iter().sum()
    }
}

/// Mean and sample standard deviation (n - 1 denominator) over folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub folds: usize,
    pub mean: MetricValues,
    pub std: MetricValues,
}

pub fn summarize(values: &[MetricValues]) -> MetricsSummary {
    let n = values.len();
    let mut mean = [0.0; 4];
    for v in values {
        for (m, x) in mean.iter_mut().zip(v.as_array()) {
            *m += x;
        }
    }
    if n > 0 {
        mean.iter_mut().for_each(|m| *m /= n as f64);
    }
    let mut var = [0.0; 4];
    if n > 1 {
        for v in values {
            for ((s, x), m) in var.iter_mut().zip(v.as_array()).zip(mean) {
                *s += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / (n - 1) as f64).sqrt());
    }
    MetricsSummary {
        folds: n,
        mean: MetricValues::from_array(mean),
        std: MetricValues::from_array(var),
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    Ok(())
}

fn check_label(p: &ProbDist, y: usize) -> Result<()> {
    if y >= p.num_classes() {
        return Err(Error::InvalidInput(format!(
            "label {y} out of range for {} classes",
            p.num_classes()
        )));
    }
    Ok(())
}

fn check_pairs(preds: &[ProbDist], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    for (i, (p, y)) in preds.iter().zip(labels).enumerate() {
        check_label(p, *y).map_err(|e| Error::InvalidInput(format!("sample {i}: {e}")))?;
    }
    Ok(())
}

fn reciprocal_rank_within(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// `1 / rank` if the true label is among the top `k`, else 0. `k` larger
/// than the class count behaves as `k = C`.
pub fn ap_at_k(p: &ProbDist, y: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    check_label(p, y)?;
    Ok(reciprocal_rank_within(rank_of_label(p, y), k))
}

pub fn map_at_k(preds: &[ProbDist], labels: &[usize], k: usize) -> Result<f64> {
    check_k(k)?;
    check_pairs(preds, labels)?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| reciprocal_rank_within(rank_of_label(p, *y), k))
        .sum();
    Ok(total / preds.len() as f64)
}

pub fn f1_at_3(preds: &[ProbDist], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, y)| rank_of_label(p, **y) <= 3)
        .count();
    Ok(F1_AT_3_HIT * hits as f64 / preds.len() as f64)
}

pub fn accuracy(preds: &[ProbDist], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, y)| rank_of_label(p, **y) == 1)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// All four metrics plus per-class error counts and confused pairs.
pub fn error_report(preds: &[ProbDist], labels: &[usize]) -> Result<MetricsReport> {
    check_pairs(preds, labels)?;
    let c = preds[0].num_classes();
    if preds.iter().any(|p| p.num_classes() != c) {
        return Err(Error::InvalidInput("predictions differ in class count".into()));
    }
    let n = preds.len();
    let mut rr3 = 0.0;
    let mut rr10 = 0.0;
    let mut correct = 0usize;
    let mut top3 = 0usize;
    let mut per_class_errors = vec![0usize; c];
    let mut confused: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (p, &y) in preds.iter().zip(labels) {
        let rank = rank_of_label(p, y);
        rr3 += reciprocal_rank_within(rank, 3);
        rr10 += reciprocal_rank_within(rank, 10);
        if rank <= 3 {
            top3 += 1;
        }
        if rank == 1 {
            correct += 1;
        } else {
            per_class_errors[y] += 1;
            let predicted = p.ranking()[0];
            *confused.entry((y, predicted)).or_default() += 1;
        }
    }
    let mut top_confused_pairs: Vec<ConfusedPair> = confused
        .into_iter()
        .map(|((true_label, predicted), count)| ConfusedPair {
            true_label,
            predicted,
            count,
        })
        .collect();
    top_confused_pairs.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then((a.true_label, a.predicted).cmp(&(b.true_label, b.predicted)))
    });
    Ok(MetricsReport {
        map_at_3: rr3 / n as f64,
        map_at_10: rr10 / n as f64,
        accuracy: correct as f64 / n as f64,
        f1_at_3: F1_AT_3_HIT * top3 as f64 / n as f64,
        n,
        per_class_errors,
        top_confused_pairs,
    })
}
