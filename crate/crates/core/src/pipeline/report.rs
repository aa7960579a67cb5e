//! Side-by-side comparison of stage-one and stage-two metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{MetricValues, MetricsReport, TOP_CONFUSED};

use super::{StageMetricsFile, SweepTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub stage1: f64,
    pub stage2: f64,
    pub delta: f64,
}

/// Held-out error count of one true class, summed over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryDelta {
    pub class: usize,
    pub label: Option<String>,
    pub stage1_errors: usize,
    pub stage2_errors: usize,
    pub delta: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageComparison {
    pub folds: usize,
    pub metrics: Vec<MetricDelta>,
    /// The classes with the most stage-one errors, worst first.
    pub categories: Vec<CategoryDelta>,
}

fn summed_errors(reports: &[MetricsReport]) -> Vec<usize> {
    let c = reports.iter().map(|r| r.per_class_errors.len()).max().unwrap_or(0);
    let mut total = vec![0; c];
    for r in reports {
        for (t, e) in total.iter_mut().zip(&r.per_class_errors) {
            *t += e;
        }
    }
    total
}

/// Mean metrics of both stages with deltas, plus error-count changes for the
/// classes stage one got wrong most often. `labels` supplies class names when known.
pub fn compare_stages(
    stage1: &StageMetricsFile,
    stage2: &StageMetricsFile,
    labels: Option<&[String]>,
) -> StageComparison {
    let (a, b): (MetricValues, MetricValues) = (stage1.summary.mean, stage2.summary.mean);
    let metrics = [
        ("MAP@3", a.map_at_3, b.map_at_3),
        ("MAP@10", a.map_at_10, b.map_at_10),
        ("Accuracy", a.accuracy, b.accuracy),
        ("F1@3", a.f1_at_3, b.f1_at_3),
    ]
    .into_iter()
    .map(|(name, x, y)| MetricDelta {
        metric: name.into(),
        stage1: x,
        stage2: y,
        delta: y - x,
    })
    .collect();

    let e1 = summed_errors(&stage1.per_fold);
    let e2 = summed_errors(&stage2.per_fold);
    let mut classes: Vec<usize> = (0..e1.len().max(e2.len())).collect();
    let err = |v: &[usize], c: usize| v.get(c).copied().unwrap_or(0);
    classes.sort_by(|&x, &y| err(&e1, y).cmp(&err(&e1, x)).then(x.cmp(&y)));
    let categories = classes
        .into_iter()
        .take(TOP_CONFUSED)
        .map(|c| {
            let (s1, s2) = (err(&e1, c), err(&e2, c));
            CategoryDelta {
                class: c,
                label: labels.and_then(|l| l.get(c).cloned()),
                stage1_errors: s1,
                stage2_errors: s2,
                delta: s2 as i64 - s1 as i64,
            }
        })
        .collect();

    StageComparison {
        folds: stage1.summary.folds,
        metrics,
        categories,
    }
}

impl StageComparison {
    pub fn render(&self) -> String {
        let mut out = format!("Metric    | Stage 1 | Stage 2 | Delta   ({} folds)\n", self.folds);
        for m in &self.metrics {
            let _ = writeln!(out, "{:<9} | {:.4}  | {:.4}  | {:+.4}", m.metric, m.stage1, m.stage2, m.delta);
        }
        out.push_str("\nClass                | Errors S1 | Errors S2 | Delta\n");
        for c in &self.categories {
            let name = c.label.clone().unwrap_or_else(|| c.class.to_string());
            let _ = writeln!(
                out,
                "{:<20} | {:>9} | {:>9} | {:+}",
                name, c.stage1_errors, c.stage2_errors, c.delta
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}

/// One line per grid point, in table order (best stage-two MAP@3 first).
pub fn render_sweep(table: &SweepTable) -> String {
    let mut out = String::from("α | β | γ | δ | K | S1 MAP@3 | S2 MAP@3 | S2 Acc. | selected\n");
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for (i, r) in table.rows.iter().enumerate() {
        let _ = write!(
            out,
            "{} | {} | {} | {} | {} | {} | {} | {} | {}",
            r.weights.alpha,
            r.weights.beta,
            r.weights.gamma,
            r.delta,
            r.k,
            f(r.stage1.map(|s| s.mean.map_at_3)),
            f(r.stage2.map(|s| s.mean.map_at_3)),
            f(r.stage2.map(|s| s.mean.accuracy)),
            f(r.selected_fraction),
        );
        if table.argmax == Some(i) {
            out.push_str("  <- best");
        }
        if let Some(e) = &r.error {
            let _ = write!(out, "  error: {e}");
        }
        out.push('\n');
    }
    out
}
