//! Grid sweeps over stage-one weights, δ and K.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::WeightTriple;
use crate::metrics::{summarize, MetricValues, MetricsReport, MetricsSummary};

use super::{stage1, stage2, StageArtifacts, TrainConfig};

/// Values to try for each axis; an empty axis keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub weights: Vec<WeightTriple>,
    pub deltas: Vec<f64>,
    pub ks: Vec<usize>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty() && self.deltas.is_empty() && self.ks.is_empty()
    }

    /// Every grid point, weights outermost and δ innermost.
    pub fn points(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let weights = if self.weights.is_empty() { vec![base.stage1_weights] } else { self.weights.clone() };
        let deltas = if self.deltas.is_empty() { vec![base.delta] } else { self.deltas.clone() };
        let ks = if self.ks.is_empty() { vec![base.k] } else { self.ks.clone() };
        let mut out = Vec::with_capacity(weights.len() * deltas.len() * ks.len());
        for &w in &weights {
            for &k in &ks {
                for &delta in &deltas {
                    out.push(TrainConfig {
                        stage1_weights: w,
                        k,
                        delta,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub weights: WeightTriple,
    pub delta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub stage1: Option<MetricsSummary>,
    pub stage2: Option<MetricsSummary>,
    /// Mean over folds of the stage-two selected fraction.
    pub selected_fraction: Option<f64>,
    pub stage1_per_fold: Vec<MetricValues>,
    pub stage2_per_fold: Vec<MetricValues>,
    /// Set when this grid point failed; the sweep carries on.
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(config: &TrainConfig, message: String) -> Self {
        SweepRow {
            weights: config.stage1_weights,
            delta: config.delta,
            k: config.k,
            stage1: None,
            stage2: None,
            selected_fraction: None,
            stage1_per_fold: Vec::new(),
            stage2_per_fold: Vec::new(),
            error: Some(message),
        }
    }

    fn from_stages(config: &TrainConfig, s1: &StageArtifacts, s2: &StageArtifacts) -> Self {
        let fractions = s2.selected_fractions().unwrap_or_default();
        let selected_fraction =
            (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64);
        SweepRow {
            weights: config.stage1_weights,
            delta: config.delta,
            k: config.k,
            stage1: Some(s1.summary),
            stage2: Some(s2.summary),
            selected_fraction,
            stage1_per_fold: s1.metrics_per_fold.iter().map(MetricsReport::values).collect(),
            stage2_per_fold: s2.metrics_per_fold.iter().map(MetricsReport::values).collect(),
            error: None,
        }
    }

    /// Stage-two mean MAP@3, the sort key.
    pub fn score(&self) -> Option<f64> {
        self.stage2.map(|s| s.mean.map_at_3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// Sorted by stage-two mean MAP@3, best first; failed points last.
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the best configuration.
    pub argmax: Option<usize>,
}

impl SweepTable {
    /// Sorts rows (stable, so grid order breaks ties) and locates the argmax.
    pub fn from_rows(mut rows: Vec<SweepRow>) -> Self {
        rows.sort_by(|a, b| match (a.score(), b.score()) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
        let argmax = rows.first().and_then(|r| r.score().map(|_| 0));
        SweepTable { rows, argmax }
    }

    pub const CSV_HEADER: [&'static str; 15] = [
        "alpha",
        "beta",
        "gamma",
        "delta",
        "K",
        "stage1_map_at_3",
        "stage1_map_at_10",
        "stage1_accuracy",
        "stage1_f1_at_3",
        "stage2_map_at_3",
        "stage2_map_at_3_std",
        "stage2_map_at_10",
        "stage2_accuracy",
        "stage2_f1_at_3",
        "selected_fraction",
    ];

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = Self::CSV_HEADER.to_vec();
        header.push("error");
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let s1 = r.stage1.map(|s| s.mean);
            let s2 = r.stage2.map(|s| s.mean);
            w.write_record([
                r.weights.alpha.to_string(),
                r.weights.beta.to_string(),
                r.weights.gamma.to_string(),
                r.delta.to_string(),
                r.k.to_string(),
                opt(s1.map(|m| m.map_at_3)),
                opt(s1.map(|m| m.map_at_10)),
                opt(s1.map(|m| m.accuracy)),
                opt(s1.map(|m| m.f1_at_3)),
                opt(s2.map(|m| m.map_at_3)),
                opt(r.stage2.map(|s| s.std.map_at_3)),
                opt(s2.map(|m| m.map_at_10)),
                opt(s2.map(|m| m.accuracy)),
                opt(s2.map(|m| m.f1_at_3)),
                opt(r.selected_fraction),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs both stages at every grid point with the base seed.
///
/// Stage one does not depend on δ, so it runs once per (weights, K) and is
/// shared by every δ at that point; selected fractions across a δ axis
/// therefore come from the same stage-one students.
pub fn sweep(dataset: &Dataset, base: &TrainConfig, grid: &SweepGrid, jobs: usize) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("sweep grid is empty".into()));
    }
    let mut stage1_cache: BTreeMap<(u64, u64, u64, usize), std::result::Result<StageArtifacts, String>> =
        BTreeMap::new();
    let mut rows = Vec::new();
    for config in grid.points(base) {
        let w = config.stage1_weights;
        let key = (w.alpha.to_bits(), w.beta.to_bits(), w.gamma.to_bits(), config.k);
        let s1 = stage1_cache.entry(key).or_insert_with(|| {
            let stage1_config = TrainConfig {
                delta: base.delta,
                ..config.clone()
            };
            stage1(dataset, &stage1_config, jobs).map_err(|e| e.to_string())
        });
        let row = match s1 {
            Err(msg) => SweepRow::failed(&config, msg.clone()),
            Ok(s1) => match config.validate().and_then(|()| stage2(s1, dataset, &config, jobs)) {
                Ok(s2) => SweepRow::from_stages(&config, s1, &s2),
                Err(e) => SweepRow::failed(&config, e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(SweepTable::from_rows(rows))
}

/// Per-fold table with a closing `Mean±Std` row:
///
/// ```text
/// Fold | α | β | γ | MAP@3 | Acc.
/// ```
pub fn kfold_table(weights: WeightTriple, per_fold: &[MetricValues]) -> String {
    let mut out = String::from("Fold | α | β | γ | MAP@3 | Acc.\n");
    for (k, v) in per_fold.iter().enumerate() {
        let _ = writeln!(
            out,
            "{} | {} | {} | {} | {:.4} | {:.4}",
            k + 1,
            weights.alpha,
            weights.beta,
            weights.gamma,
            v.map_at_3,
            v.accuracy
        );
    }
    let s = summarize(per_fold);
    let _ = writeln!(
        out,
        "Mean±Std | {} | {} | {} | {:.4}±{:.4} | {:.4}±{:.4}",
        weights.alpha, weights.beta, weights.gamma, s.mean.map_at_3, s.std.map_at_3, s.mean.accuracy, s.std.accuracy
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn values(m3: f64, acc: f64) -> MetricValues {
        MetricValues {
            map_at_3: m3,
            map_at_10: m3,
            accuracy: acc,
            f1_at_3: 0.4,
        }
    }

    fn row(score: Option<f64>) -> SweepRow {
        SweepRow {
            weights: WeightTriple::BALANCED,
            delta: 0.05,
            k: 5,
            stage1: None,
            stage2: score.map(|s| summarize(&[values(s, s)])),
            selected_fraction: None,
            stage1_per_fold: vec![],
            stage2_per_fold: vec![],
            error: None,
        }
    }

    #[test]
    fn rows_sort_descending_with_failures_last() {
        let t = SweepTable::from_rows(vec![row(Some(0.5)), row(None), row(Some(0.9)), row(Some(0.7))]);
        let scores: Vec<_> = t.rows.iter().map(SweepRow::score).collect();
        assert_eq!(scores, vec![Some(0.9), Some(0.7), Some(0.5), None]);
        assert_eq!(t.argmax, Some(0));
        assert_eq!(SweepTable::from_rows(vec![row(None)]).argmax, None);
    }

    #[test]
    fn grid_points_fill_empty_axes_from_base() {
        let base = TrainConfig::default();
        let grid = SweepGrid { deltas: vec![0.01, 0.1], ks: vec![3, 5, 8], ..SweepGrid::default() };
        let pts = grid.points(&base);
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|c| c.stage1_weights == base.stage1_weights));
        assert!(SweepGrid::default().is_empty());
    }

    #[test]
    fn empty_grid_is_rejected() {
        let ds = crate::data::synth_generate(&crate::data::SynthConfig { n: 200, ..Default::default() }).unwrap();
        assert!(sweep(&ds, &TrainConfig::default(), &SweepGrid::default(), 1).is_err());
    }

    #[test]
    fn bad_points_are_recorded_not_fatal() {
        let ds = crate::data::synth_generate(&crate::data::SynthConfig {
            classes: 5,
            dim: 8,
            n: 100,
            ..Default::default()
        })
        .unwrap();
        let base = TrainConfig {
            teacher_arch: Arch::Linear,
            k: 2,
            teacher_epochs: 1,
            student_epochs: 1,
            stage2_epochs: 1,
            ..TrainConfig::default()
        };
        let grid = SweepGrid { deltas: vec![0.05, 1.5], ..SweepGrid::default() };
        let t = sweep(&ds, &base, &grid, 1).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows[0].error.is_none());
        assert!(t.rows[1].error.as_deref().unwrap().contains("delta"));
    }

    #[test]
    fn kfold_table_layout() {
        let t = kfold_table(WeightTriple::BALANCED, &[values(0.8, 0.7), values(0.9, 0.8)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Fold | α | β | γ | MAP@3 | Acc.");
        assert_eq!(lines[1], "1 | 0.33 | 0.33 | 0.34 | 0.8000 | 0.7000");
        assert!(lines[3].starts_with("Mean±Std | 0.33 | 0.33 | 0.34 | 0.8500±0.0707 | 0.7500±0.0707"));
    }
}
