//! Dual-tier margin selection.
//!
//! Tier one looks at the teacher distribution: a sample is Near-miss when the
//! teacher is right with a top-2 gap of at most `delta`, or when the true
//! label sits at rank 2 or 3; it is Hard-hard when the true label ranks below
//! 3. Tier two scores each selected sample on the student distribution with
//! `M = d * exp(-H)` (margin to the top class times exp of minus entropy) and
//! splits each tier-one set at its median of `M` into close (`M <= median`)
//! and far (`M > median`) halves. Each of the four cells gets its own loss
//! weights.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::WeightTriple;
use crate::model::ProbDist;

/// Smallest class count for which `rank(y) > 3` is reachable.
pub const MIN_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionView {
    pub sample_id: String,
    pub p_teacher: ProbDist,
    pub p_student: ProbDist,
    pub true_label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier1 {
    NearMiss,
    HardHard,
    Unselected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CategoryKind {
    #[serde(rename = "NMclose")]
    NmClose,
    #[serde(rename = "NMfar")]
    NmFar,
    #[serde(rename = "HHclose")]
    HhClose,
    #[serde(rename = "HHfar")]
    HhFar,
    Unselected,
}

impl CategoryKind {
    pub const ALL: [CategoryKind; 5] = [
        CategoryKind::NmClose,
        CategoryKind::NmFar,
        CategoryKind::HhClose,
        CategoryKind::HhFar,
        CategoryKind::Unselected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CategoryKind::NmClose => "NMclose",
            CategoryKind::NmFar => "NMfar",
            CategoryKind::HhClose => "HHclose",
            CategoryKind::HhFar => "HHfar",
            CategoryKind::Unselected => "Unselected",
        }
    }

    pub fn is_selected(self) -> bool {
        self != CategoryKind::Unselected
    }
}

/// Category plus the composite difficulty that placed it (absent iff unselected).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionCategory {
    pub kind: CategoryKind,
    pub difficulty_m: Option<f64>,
}

/// Per-sample outcome of [`categorize_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSelection {
    pub id: String,
    pub kind: CategoryKind,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    /// Rank of the true label under the teacher distribution.
    pub rank: usize,
    /// Teacher top-1 minus top-2 probability.
    pub top1_minus_top2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    #[serde(rename = "NMclose")]
    pub nm_close: usize,
    #[serde(rename = "NMfar")]
    pub nm_far: usize,
    #[serde(rename = "HHclose")]
    pub hh_close: usize,
    #[serde(rename = "HHfar")]
    pub hh_far: usize,
    #[serde(rename = "Unselected")]
    pub unselected: usize,
}

impl CategoryCounts {
    pub fn get(&self, kind: CategoryKind) -> usize {
        match kind {
            CategoryKind::NmClose => self.nm_close,
            CategoryKind::NmFar => self.nm_far,
            CategoryKind::HhClose => self.hh_close,
            CategoryKind::HhFar => self.hh_far,
            CategoryKind::Unselected => self.unselected,
        }
    }

    fn bump(&mut self, kind: CategoryKind) {
        let slot = match kind {
            CategoryKind::NmClose => &mut self.nm_close,
            CategoryKind::NmFar => &mut self.nm_far,
            CategoryKind::HhClose => &mut self.hh_close,
            CategoryKind::HhFar => &mut self.hh_far,
            CategoryKind::Unselected => &mut self.unselected,
        };
        *slot += 1;
    }

    pub fn total(&self) -> usize {
        CategoryKind::ALL.iter().map(|k| self.get(*k)).sum()
    }

    pub fn selected(&self) -> usize {
        self.total() - self.unselected
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Medians {
    #[serde(rename = "NM")]
    pub nm: Option<f64>,
    #[serde(rename = "HH")]
    pub hh: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub counts: CategoryCounts,
    pub selected_fraction: f64,
    pub medians: Medians,
    pub per_sample: Vec<SampleSelection>,
}

impl SelectionReport {
    pub fn category(&self, index: usize) -> SelectionCategory {
        let s = &self.per_sample[index];
        SelectionCategory {
            kind: s.kind,
            difficulty_m: s.m,
        }
    }

    pub fn kinds(&self) -> impl Iterator<Item = CategoryKind> + '_ {
        self.per_sample.iter().map(|s| s.kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection report serializes")
    }

    /// CSV with columns `id, kind, M, rank, top1_minus_top2`; `M` is empty when unselected.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "kind", "M", "rank", "top1_minus_top2"])?;
        for s in &self.per_sample {
            w.write_record([
                s.id.clone(),
                s.kind.name().to_string(),
                s.m.map(|m| m.to_string()).unwrap_or_default(),
                s.rank.to_string(),
                s.top1_minus_top2.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 1-based rank of `y` under the same total order as `predict_topk`.
pub fn rank_of_label(p: &ProbDist, y: usize) -> usize {
    let probs = p.probs();
    let py = probs[y];
    1 + probs
        .iter()
        .enumerate()
        .filter(|&(j, &pj)| pj > py || (pj == py && j < y))
        .count()
}

fn top_two(p: &ProbDist) -> (f64, f64) {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in p.probs() {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    (first, second)
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")))
    }
}

fn check_view(view: &PredictionView) -> Result<usize> {
    let c = view.p_teacher.num_classes();
    if view.p_student.num_classes() != c {
        return Err(Error::InvalidInput(format!(
            "sample {}: teacher has {c} classes, student has {}",
            view.sample_id,
            view.p_student.num_classes()
        )));
    }
    if view.true_label >= c {
        return Err(Error::InvalidInput(format!(
            "sample {}: label {} out of range for {c} classes",
            view.sample_id, view.true_label
        )));
    }
    if c < MIN_CLASSES {
        return Err(Error::Config(format!(
            "selection needs at least {MIN_CLASSES} classes, got {c}"
        )));
    }
    Ok(c)
}

/// Tier-one decision on the teacher distribution.
pub fn classify_tier1(view: &PredictionView, delta: f64) -> Result<Tier1> {
    check_delta(delta)?;
    check_view(view)?;
    Ok(tier1_unchecked(view, delta))
}

fn tier1_unchecked(view: &PredictionView, delta: f64) -> Tier1 {
    let rank = rank_of_label(&view.p_teacher, view.true_label);
    if rank > 3 {
        return Tier1::HardHard;
    }
    if rank >= 2 {
        return Tier1::NearMiss;
    }
    let (first, second) = top_two(&view.p_teacher);
    if first - second <= delta {
        Tier1::NearMiss
    } else {
        Tier1::Unselected
    }
}

/// `|p_s(y) - max_j p_s(j)|`.
pub fn margin_d(p_s: &ProbDist, y: usize) -> f64 {
    let max = p_s.probs().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (p_s.probs()[y] - max).abs()
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy_h(p: &ProbDist) -> f64 {
    -p.probs()
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// `margin_d * exp(-entropy_h)`.
pub fn composite_m(p_s: &ProbDist, y: usize) -> f64 {
    margin_d(p_s, y) * (-entropy_h(p_s)).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MedianSplit {
    pub close: Vec<String>,
    pub far: Vec<String>,
    pub median: Option<f64>,
}

fn median_of_sorted(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
    }
}

/// Splits at the median of `M`: close is `M <= median`, far is `M > median`.
///
/// Ids come back ordered by `(M, id)`. An empty input gives empty halves
/// and no median.
pub fn median_split(set: &[(String, f64)]) -> MedianSplit {
    let mut sorted: Vec<&(String, f64)> = set.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let values: Vec<f64> = sorted.iter().map(|(_, m)| *m).collect();
    let Some(median) = median_of_sorted(&values) else {
        return MedianSplit {
            close: Vec::new(),
            far: Vec::new(),
            median: None,
        };
    };
    let (close, far): (Vec<_>, Vec<_>) = sorted.into_iter().partition(|(_, m)| *m <= median);
    MedianSplit {
        close: close.into_iter().map(|(id, _)| id.clone()).collect(),
        far: far.into_iter().map(|(id, _)| id.clone()).collect(),
        median: Some(median),
    }
}

/// Full five-way categorization of a dataset.
pub fn categorize_dataset(views: &[PredictionView], delta: f64) -> Result<SelectionReport> {
    check_delta(delta)?;
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot categorize an empty dataset".into()))?;
    let c = check_view(first)?;
    for v in views {
        if check_view(v)? != c {
            return Err(Error::InvalidInput(format!(
                "sample {}: inconsistent class count",
                v.sample_id
            )));
        }
    }

    let tiers: Vec<Tier1> = views.iter().map(|v| tier1_unchecked(v, delta)).collect();
    let scores: Vec<Option<f64>> = views
        .iter()
        .zip(&tiers)
        .map(|(v, t)| (*t != Tier1::Unselected).then(|| composite_m(&v.p_student, v.true_label)))
        .collect();

    let median_for = |tier: Tier1| {
        let mut ms: Vec<f64> = tiers
            .iter()
            .zip(&scores)
            .filter(|(t, _)| **t == tier)
            .filter_map(|(_, m)| *m)
            .collect();
        ms.sort_by(f64::total_cmp);
        median_of_sorted(&ms)
    };
    let median_nm = median_for(Tier1::NearMiss);
    let median_hh = median_for(Tier1::HardHard);

    let mut counts = CategoryCounts::default();
    let per_sample: Vec<SampleSelection> = views
        .iter()
        .zip(tiers.iter().zip(&scores))
        .map(|(v, (tier, m))| {
            let kind = match (tier, m) {
                (Tier1::NearMiss, Some(m)) => {
                    if *m <= median_nm.expect("non-empty NM set has a median") {
                        CategoryKind::NmClose
                    } else {
                        CategoryKind::NmFar
                    }
                }
                (Tier1::HardHard, Some(m)) => {
                    if *m <= median_hh.expect("non-empty HH set has a median") {
                        CategoryKind::HhClose
                    } else {
                        CategoryKind::HhFar
                    }
                }
                _ => CategoryKind::Unselected,
            };
            counts.bump(kind);
            let (first, second) = top_two(&v.p_teacher);
            SampleSelection {
                id: v.sample_id.clone(),
                kind,
                m: *m,
                rank: rank_of_label(&v.p_teacher, v.true_label),
                top1_minus_top2: first - second,
            }
        })
        .collect();

    Ok(SelectionReport {
        selected_fraction: counts.selected() as f64 / views.len() as f64,
        counts,
        medians: Medians {
            nm: median_nm,
            hh: median_hh,
        },
        per_sample,
    })
}

/// Adaptive loss weights per category.
pub fn weights_for(kind: CategoryKind) -> Result<WeightTriple> {
    match kind {
        CategoryKind::NmClose => Ok(WeightTriple::CE_ONLY),
        CategoryKind::NmFar => Ok(WeightTriple::UNIFORM),
        CategoryKind::HhClose => Ok(WeightTriple::SOFT_ONLY),
        CategoryKind::HhFar => Ok(WeightTriple::UNIFORM),
        CategoryKind::Unselected => Err(Error::InvalidInput(
            "unselected samples carry no stage-two loss weights".into(),
        )),
    }
}

/// Count of each category, keyed by name, for compact summaries.
pub fn count_map(report: &SelectionReport) -> BTreeMap<&'static str, usize> {
    CategoryKind::ALL
        .iter()
        .map(|k| (k.name(), report.counts.get(*k)))
        .collect()
}
