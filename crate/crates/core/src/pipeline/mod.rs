//! Stage-one distillation, stage-two selective refinement, evaluation and
//! hyperparameter sweeps.
//!
//! Each fold is an independent task with its own random streams derived from
//! `(seed, role, fold)`, so results do not depend on how many folds run at
//! once.

mod report;
mod rundir;
mod sweep;
mod train;

use std::collections::HashMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_kfold, Dataset, FoldPlan, Sample};
use crate::error::{Error, Result};
use crate::losses::WeightTriple;
use crate::metrics::{error_report, summarize, MetricValues, MetricsReport, MetricsSummary};
use crate::model::{predict_proba, Arch, ModelParams, ProbDist};
use crate::selection::{categorize_dataset, weights_for, PredictionView, SelectionReport, MIN_CLASSES};

pub use report::{compare_stages, render_sweep, CategoryDelta, MetricDelta, StageComparison};
pub use rundir::{CheckpointKind, RunDir, StageMetricsFile};
pub use sweep::{kfold_table, sweep, SweepGrid, SweepRow, SweepTable};
pub use train::{
    batch_gradient, fold_rng, sample_gradient, sample_loss, train_single, Stream, TrainItem,
    TrainOptions, TrainOutcome,
};

/// Defaults shared by [`TrainConfig::default`] and the command line.
pub mod defaults {
    pub const TEACHER_ARCH: &str = "hidden:32";
    pub const STUDENT_ARCH: &str = "linear";
    pub const K: usize = 5;
    pub const TAU: f64 = 1.0;
    pub const DELTA: f64 = 0.05;
    pub const ALPHA: f64 = 0.33;
    pub const BETA: f64 = 0.33;
    pub const GAMMA: f64 = 0.34;
    /// Reference optimizer rates were 1e-4 (teacher), 2e-4 (student) and
    /// 1e-6 (stage two) with AdamW on multi-billion-parameter models. These
    /// are the plain-SGD equivalents for the small models here; stage two
    /// stays two orders of magnitude below stage one.
    pub const LR_TEACHER: f64 = 0.1;
    pub const LR_STUDENT: f64 = 0.1;
    pub const STAGE2_LR: f64 = 1e-3;
    pub const MAX_GRAD_NORM: f64 = 4.0;
    pub const TEACHER_EPOCHS: usize = 20;
    pub const STUDENT_EPOCHS: usize = 20;
    pub const STAGE2_EPOCHS: usize = 5;
    pub const BATCH_SIZE: usize = 16;
    pub const SEED: u64 = 0;
}

/// Loss weighting applied to selected samples in stage two.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Scheme {
    /// Per-category weights from [`weights_for`].
    #[default]
    Adaptive,
    /// `(1, 1, 1)` for every selected sample.
    Uniform,
}

/// Teacher distribution used for tier-one selection in stage two.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSignal {
    /// The cached out-of-fold soft label, the same one stage one trained on.
    #[default]
    Cached,
    /// Mean over all fold teachers. Includes teachers that saw the sample.
    EnsembleMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub teacher_arch: Arch,
    pub student_arch: Arch,
    #[serde(rename = "K")]
    pub k: usize,
    pub tau: f64,
    pub delta: f64,
    pub stage1_weights: WeightTriple,
    pub lr_teacher: f64,
    pub lr_student: f64,
    pub stage2_lr: f64,
    pub max_grad_norm: Option<f64>,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub stage2_scheme: Stage2Scheme,
    #[serde(default)]
    pub teacher_signal: TeacherSignal,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            teacher_arch: defaults::TEACHER_ARCH.parse().expect("valid default arch"),
            student_arch: defaults::STUDENT_ARCH.parse().expect("valid default arch"),
            k: defaults::K,
            tau: defaults::TAU,
            delta: defaults::DELTA,
            stage1_weights: WeightTriple::new(defaults::ALPHA, defaults::BETA, defaults::GAMMA),
            lr_teacher: defaults::LR_TEACHER,
            lr_student: defaults::LR_STUDENT,
            stage2_lr: defaults::STAGE2_LR,
            max_grad_norm: Some(defaults::MAX_GRAD_NORM),
            teacher_epochs: defaults::TEACHER_EPOCHS,
            student_epochs: defaults::STUDENT_EPOCHS,
            stage2_epochs: defaults::STAGE2_EPOCHS,
            batch_size: defaults::BATCH_SIZE,
            seed: defaults::SEED,
            stage2_scheme: Stage2Scheme::Adaptive,
            teacher_signal: TeacherSignal::Cached,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidParameter(format!("K must be at least 2, got {}", self.k)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        for (name, lr) in [
            ("lr_teacher", self.lr_teacher),
            ("lr_student", self.lr_student),
            ("stage2_lr", self.stage2_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {lr}")));
            }
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "max_grad_norm must be positive, got {m}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        self.stage1_weights.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelRecord {
    pub sample_id: String,
    pub fold: usize,
    pub p_teacher: ProbDist,
    pub tau: f64,
}

/// Out-of-fold teacher distributions, one record per training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelCache {
    records: Vec<SoftLabelRecord>,
    index: HashMap<String, usize>,
}

impl SoftLabelCache {
    pub fn new(records: Vec<SoftLabelRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.sample_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.sample_id.clone()));
            }
        }
        Ok(SoftLabelCache { records, index })
    }

    pub fn records(&self) -> &[SoftLabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&SoftLabelRecord> {
        self.index.get(sample_id).map(|&i| &self.records[i])
    }

    fn require(&self, sample_id: &str) -> Result<&SoftLabelRecord> {
        self.get(sample_id).ok_or_else(|| {
            Error::InvalidInput(format!("sample {sample_id} has no cached soft label"))
        })
    }

    /// CSV with columns `id, fold, tau, p_0 .. p_{C-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let c = self.records.first().map_or(0, |r| r.p_teacher.num_classes());
        let mut header = vec!["id".to_string(), "fold".into(), "tau".into()];
        header.extend((0..c).map(|j| format!("p_{j}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.sample_id.clone(), r.fold.to_string(), r.tau.to_string()];
            row.extend(r.p_teacher.probs().iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, source_name: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let parse_err = |line: usize, message: String| Error::Parse {
            source_name: source_name.into(),
            line,
            message,
        };
        let mut records = Vec::new();
        for (i, row) in rd.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| parse_err(line, e.to_string()))?;
            if row.len() < 5 {
                return Err(parse_err(line, "expected id, fold, tau and at least two probabilities".into()));
            }
            let num = |j: usize| -> Result<f64> {
                row[j]
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("column {j}: {e}")))
            };
            let fold = row[1]
                .parse::<usize>()
                .map_err(|e| parse_err(line, format!("fold: {e}")))?;
            let probs = (3..row.len()).map(num).collect::<Result<Vec<_>>>()?;
            records.push(SoftLabelRecord {
                sample_id: row[0].to_string(),
                fold,
                tau: num(2)?,
                p_teacher: ProbDist::new(probs).map_err(|e| parse_err(line, e.to_string()))?,
            });
        }
        SoftLabelCache::new(records)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1")]
    One,
    #[serde(rename = "stage2")]
    Two,
}

/// Everything a stage produces, per fold.
#[derive(Clone, Debug, PartialEq)]
pub struct StageArtifacts {
    pub stage: Stage,
    pub fold_plan: FoldPlan,
    pub fold_teachers: Vec<ModelParams>,
    pub fold_students: Vec<ModelParams>,
    pub soft_labels: SoftLabelCache,
    /// One report per fold (stage two only).
    pub selection: Option<Vec<SelectionReport>>,
    pub teacher_metrics: Vec<MetricsReport>,
    pub metrics_per_fold: Vec<MetricsReport>,
    pub summary: MetricsSummary,
    /// Folds where stage two had nothing selected and left the student unchanged.
    pub noop_folds: Vec<usize>,
}

impl StageArtifacts {
    pub fn teacher_summary(&self) -> MetricsSummary {
        summarize(&self.teacher_metrics.iter().map(MetricsReport::values).collect::<Vec<_>>())
    }

    pub fn selected_fractions(&self) -> Option<Vec<f64>> {
        self.selection
            .as_ref()
            .map(|s| s.iter().map(|r| r.selected_fraction).collect())
    }
}

fn summarize_reports(reports: &[MetricsReport]) -> MetricsSummary {
    summarize(&reports.iter().map(MetricsReport::values).collect::<Vec<MetricValues>>())
}

/// Runs `task(fold)` for every fold on at most `jobs` threads (0 = all cores),
/// returning results in fold order.
pub(crate) fn run_folds<T, F>(jobs: usize, folds: usize, task: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..folds).into_par_iter().map(&task).collect())
}

/// Forward pass and temperature softmax over a set of samples, then the full metrics report.
pub fn evaluate_samples(params: &ModelParams, samples: &[&Sample], tau: f64) -> Result<MetricsReport> {
    let preds = samples
        .iter()
        .map(|s| predict_proba(params, &s.features, tau))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    error_report(&preds, &labels)
}

pub fn evaluate(params: &ModelParams, dataset: &Dataset, tau: f64) -> Result<MetricsReport> {
    if params.num_classes() != dataset.num_classes() {
        return Err(Error::InvalidInput(format!(
            "model has {} classes, dataset has {}",
            params.num_classes(),
            dataset.num_classes()
        )));
    }
    let refs: Vec<&Sample> = dataset.samples.iter().collect();
    evaluate_samples(params, &refs, tau)
}

/// Mean of the per-model probability outputs. Not part of the two-stage
/// method itself; offered for turning K fold students into one predictor.
pub fn ensemble_predict(models: &[ModelParams], features: &[f64], tau: f64) -> Result<ProbDist> {
    let dists = models
        .iter()
        .map(|m| predict_proba(m, features, tau))
        .collect::<Result<Vec<_>>>()?;
    ProbDist::mean(&dists.iter().collect::<Vec<_>>())
}

fn check_dataset(dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    if dataset.num_classes() < MIN_CLASSES {
        return Err(Error::Config(format!(
            "the two-stage method needs at least {MIN_CLASSES} classes, dataset has {}",
            dataset.num_classes()
        )));
    }
    if dataset.len() < config.k {
        return Err(Error::Config(format!(
            "K = {} exceeds the dataset size {}",
            config.k,
            dataset.len()
        )));
    }
    Ok(())
}

struct FoldSplit {
    train: Vec<usize>,
    held_out: Vec<usize>,
}

fn fold_splits(plan: &FoldPlan, dataset: &Dataset) -> Result<Vec<FoldSplit>> {
    let folds = plan.fold_indices(&dataset.samples)?;
    folds
        .iter()
        .enumerate()
        .map(|(k, held_out)| {
            if held_out.is_empty() {
                return Err(Error::Config(format!("fold {k} holds no samples of any class")));
            }
            let train = plan.out_of_fold(&dataset.samples, k)?;
            if train.is_empty() {
                return Err(Error::Config(format!("fold {k} leaves no training samples")));
            }
            Ok(FoldSplit {
                train,
                held_out: held_out.clone(),
            })
        })
        .collect()
}

/// Teacher for fold `k`: trained on every sample outside fold `k` with plain CE at `tau = 1`.
fn train_teacher(dataset: &Dataset, train_idx: &[usize], config: &TrainConfig, k: usize) -> Result<ModelParams> {
    let init = ModelParams::init(
        config.teacher_arch,
        dataset.num_features(),
        dataset.num_classes(),
        &mut fold_rng(config.seed, Stream::TeacherInit, k),
    )?;
    let items: Vec<TrainItem<'_>> = train_idx
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            TrainItem {
                features: &s.features,
                label: s.label,
                teacher: None,
                weights: WeightTriple::CE_ONLY,
            }
        })
        .collect();
    let opts = TrainOptions {
        epochs: config.teacher_epochs,
        lr: config.lr_teacher,
        max_grad_norm: config.max_grad_norm,
        batch_size: config.batch_size,
        tau: 1.0,
    };
    let out = train_single(init, &items, &opts, &mut fold_rng(config.seed, Stream::TeacherTrain, k))
        .map_err(|e| annotate(e, &format!("teacher {k}")))?;
    Ok(out.params)
}

fn annotate(e: Error, what: &str) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("{what}: {msg}")),
        other => other,
    }
}

/// Student for fold `k`, trained on the same out-of-fold samples as teacher `k`,
/// each paired with its cached soft label.
pub fn train_student(
    dataset: &Dataset,
    train_idx: &[usize],
    cache: Option<&SoftLabelCache>,
    config: &TrainConfig,
    k: usize,
) -> Result<ModelParams> {
    let init = ModelParams::init(
        config.student_arch,
        dataset.num_features(),
        dataset.num_classes(),
        &mut fold_rng(config.seed, Stream::StudentInit, k),
    )?;
    let items = train_idx
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let teacher = match cache {
                Some(c) => Some(&c.require(&s.id)?.p_teacher),
                None => None,
            };
            Ok(TrainItem {
                features: &s.features,
                label: s.label,
                teacher,
                weights: config.stage1_weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = TrainOptions {
        epochs: config.student_epochs,
        lr: config.lr_student,
        max_grad_norm: config.max_grad_norm,
        batch_size: config.batch_size,
        tau: config.tau,
    };
    let out = train_single(init, &items, &opts, &mut fold_rng(config.seed, Stream::StudentTrain, k))
        .map_err(|e| annotate(e, &format!("student {k}")))?;
    Ok(out.params)
}

/// Stage one: fold teachers, out-of-fold soft labels, distilled fold students.
///
/// `jobs` caps concurrent folds (0 = one per core); results are identical for any value.
pub fn stage1(dataset: &Dataset, config: &TrainConfig, jobs: usize) -> Result<StageArtifacts> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let plan = stratified_kfold(&dataset.samples, config.k, config.seed)?;
    let splits = fold_splits(&plan, dataset)?;

    let teachers = run_folds(jobs, config.k, |k| {
        train_teacher(dataset, &splits[k].train, config, k)
    })?;

    let mut records: Vec<Option<SoftLabelRecord>> = vec![None; dataset.len()];
    for (k, split) in splits.iter().enumerate() {
        for &i in &split.held_out {
            let s = &dataset.samples[i];
            records[i] = Some(SoftLabelRecord {
                sample_id: s.id.clone(),
                fold: k,
                p_teacher: predict_proba(&teachers[k], &s.features, config.tau)?,
                tau: config.tau,
            });
        }
    }
    let cache = SoftLabelCache::new(
        records
            .into_iter()
            .map(|r| r.expect("every sample sits in exactly one fold"))
            .collect(),
    )?;

    let students = run_folds(jobs, config.k, |k| {
        train_student(dataset, &splits[k].train, Some(&cache), config, k)
    })?;

    let held_out = |k: usize| dataset.subset(&splits[k].held_out);
    let teacher_metrics = run_folds(jobs, config.k, |k| {
        evaluate_samples(&teachers[k], &held_out(k), config.tau)
    })?;
    let metrics = run_folds(jobs, config.k, |k| {
        evaluate_samples(&students[k], &held_out(k), config.tau)
    })?;

    Ok(StageArtifacts {
        stage: Stage::One,
        fold_plan: plan,
        fold_teachers: teachers,
        fold_students: students,
        soft_labels: cache,
        selection: None,
        teacher_metrics,
        summary: summarize_reports(&metrics),
        metrics_per_fold: metrics,
        noop_folds: Vec::new(),
    })
}

/// Tier-one/tier-two views of fold `k`'s training samples.
pub fn prediction_views(
    artifacts: &StageArtifacts,
    dataset: &Dataset,
    train_idx: &[usize],
    student: &ModelParams,
    config: &TrainConfig,
) -> Result<Vec<PredictionView>> {
    train_idx
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let p_teacher = match config.teacher_signal {
                TeacherSignal::Cached => artifacts.soft_labels.require(&s.id)?.p_teacher.clone(),
                TeacherSignal::EnsembleMean => {
                    ensemble_predict(&artifacts.fold_teachers, &s.features, config.tau)?
                }
            };
            Ok(PredictionView {
                sample_id: s.id.clone(),
                p_teacher,
                p_student: predict_proba(student, &s.features, config.tau)?,
                true_label: s.label,
            })
        })
        .collect()
}

/// Stage-two selection for every fold without any training: fold `k`'s
/// training samples scored with stage-one student `k`.
pub fn select_folds(
    artifacts: &StageArtifacts,
    dataset: &Dataset,
    config: &TrainConfig,
    jobs: usize,
) -> Result<Vec<SelectionReport>> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let splits = fold_splits(&artifacts.fold_plan, dataset)?;
    run_folds(jobs, artifacts.fold_plan.k, |k| {
        let student = artifacts.fold_students.get(k).ok_or_else(|| {
            Error::InvalidInput(format!("no stage-one student for fold {k}"))
        })?;
        let views = prediction_views(artifacts, dataset, &splits[k].train, student, config)?;
        categorize_dataset(&views, config.delta)
    })
}

struct Stage2Fold {
    student: ModelParams,
    selection: SelectionReport,
    metrics: MetricsReport,
    noop: bool,
}

/// Stage two: per fold, select Near-miss/Hard-hard training samples and keep
/// training the fold student on them alone with category-dependent weights.
pub fn stage2(
    artifacts: &StageArtifacts,
    dataset: &Dataset,
    config: &TrainConfig,
    jobs: usize,
) -> Result<StageArtifacts> {
    config.validate()?;
    check_dataset(dataset, config)?;
    if artifacts.fold_students.len() != artifacts.fold_plan.k
        || artifacts.fold_teachers.len() != artifacts.fold_plan.k
    {
        return Err(Error::InvalidInput(
            "stage-one artifacts do not hold one teacher and one student per fold".into(),
        ));
    }
    let splits = fold_splits(&artifacts.fold_plan, dataset)?;
    let k_total = artifacts.fold_plan.k;

    let folds = run_folds(jobs, k_total, |k| {
        let split = &splits[k];
        let start = &artifacts.fold_students[k];
        let views = prediction_views(artifacts, dataset, &split.train, start, config)?;
        let selection = categorize_dataset(&views, config.delta)?;

        let items = split
            .train
            .iter()
            .zip(&selection.per_sample)
            .filter(|(_, sel)| sel.kind.is_selected())
            .map(|(&i, sel)| {
                let s = &dataset.samples[i];
                let weights = match config.stage2_scheme {
                    Stage2Scheme::Adaptive => weights_for(sel.kind)?,
                    Stage2Scheme::Uniform => WeightTriple::UNIFORM,
                };
                Ok(TrainItem {
                    features: &s.features,
                    label: s.label,
                    teacher: Some(&artifacts.soft_labels.require(&s.id)?.p_teacher),
                    weights,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let (student, noop) = if items.is_empty() {
            (start.clone(), true)
        } else {
            let opts = TrainOptions {
                epochs: config.stage2_epochs,
                lr: config.stage2_lr,
                max_grad_norm: config.max_grad_norm,
                batch_size: config.batch_size,
                tau: config.tau,
            };
            let out = train_single(
                start.clone(),
                &items,
                &opts,
                &mut fold_rng(config.seed, Stream::StageTwo, k),
            )
            .map_err(|e| annotate(e, &format!("stage-two student {k}")))?;
            (out.params, false)
        };
        let metrics = evaluate_samples(&student, &dataset.subset(&split.held_out), config.tau)?;
        Ok(Stage2Fold {
            student,
            selection,
            metrics,
            noop,
        })
    })?;

    let mut students = Vec::with_capacity(k_total);
    let mut selection = Vec::with_capacity(k_total);
    let mut metrics = Vec::with_capacity(k_total);
    let mut noop_folds = Vec::new();
    for (k, f) in folds.into_iter().enumerate() {
        students.push(f.student);
        selection.push(f.selection);
        metrics.push(f.metrics);
        if f.noop {
            noop_folds.push(k);
        }
    }
    Ok(StageArtifacts {
        stage: Stage::Two,
        fold_plan: artifacts.fold_plan.clone(),
        fold_teachers: artifacts.fold_teachers.clone(),
        fold_students: students,
        soft_labels: artifacts.soft_labels.clone(),
        selection: Some(selection),
        teacher_metrics: artifacts.teacher_metrics.clone(),
        summary: summarize_reports(&metrics),
        metrics_per_fold: metrics,
        noop_folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn small_data(seed: u64) -> Dataset {
        synth_generate(&SynthConfig {
            classes: 5,
            dim: 8,
            n: 150,
            prototype_scale: 1.0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            teacher_arch: Arch::OneHidden { hidden_width: 6 },
            k: 3,
            teacher_epochs: 4,
            student_epochs: 4,
            stage2_epochs: 2,
            stage2_lr: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults_are_valid_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage1_weights, WeightTriple::BALANCED);
        assert_eq!((c.k, c.tau, c.delta, c.batch_size), (5, 1.0, 0.05, 16));
        assert_eq!(c.max_grad_norm, Some(4.0));
        assert!(c.stage2_lr < c.lr_student);
        let back: TrainConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { k: 1, ..TrainConfig::default() },
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
            TrainConfig { delta: 1.0, ..TrainConfig::default() },
            TrainConfig { stage2_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { stage1_weights: WeightTriple::new(0.0, 0.0, 0.0), ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn stage1_covers_each_sample_once() {
        let ds = small_data(1);
        let cfg = fast_config();
        let a = stage1(&ds, &cfg, 2).unwrap();
        assert_eq!(a.soft_labels.len(), ds.len());
        for s in &ds.samples {
            let r = a.soft_labels.get(&s.id).unwrap();
            assert_eq!(Some(r.fold), a.fold_plan.fold_of(&s.id));
            assert_eq!(r.tau, cfg.tau);
        }
        assert_eq!(a.fold_students.len(), 3);
        assert_eq!(a.metrics_per_fold.len(), 3);
        assert_eq!(a.summary.folds, 3);
    }

    #[test]
    fn ce_only_students_ignore_the_cache() {
        let ds = small_data(2);
        let cfg = TrainConfig { stage1_weights: WeightTriple::CE_ONLY, ..fast_config() };
        let a = stage1(&ds, &cfg, 1).unwrap();
        let plan = &a.fold_plan;
        for k in 0..cfg.k {
            let train = plan.out_of_fold(&ds.samples, k).unwrap();
            let without = train_student(&ds, &train, None, &cfg, k).unwrap();
            assert_eq!(without, a.fold_students[k]);
        }
    }

    #[test]
    fn stage1_rejects_three_classes() {
        let mut ds = small_data(3);
        ds.labels = crate::data::LabelSpace::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        for s in &mut ds.samples {
            s.label %= 3;
        }
        assert!(matches!(stage1(&ds, &fast_config(), 1), Err(Error::Config(_))));
    }

    #[test]
    fn stage2_attaches_selection_and_touches_only_students() {
        let ds = small_data(4);
        let cfg = fast_config();
        let a1 = stage1(&ds, &cfg, 0).unwrap();
        let a2 = stage2(&a1, &ds, &cfg, 0).unwrap();
        let sel = a2.selection.as_ref().unwrap();
        assert_eq!(sel.len(), cfg.k);
        for (k, r) in sel.iter().enumerate() {
            let train = a1.fold_plan.out_of_fold(&ds.samples, k).unwrap();
            assert_eq!(r.counts.total(), train.len());
        }
        assert_eq!(a2.fold_teachers, a1.fold_teachers);
        assert_eq!(a2.soft_labels, a1.soft_labels);
        assert_eq!(a2.teacher_metrics, a1.teacher_metrics);
    }

    #[test]
    fn soft_label_csv_round_trip() {
        let ds = small_data(5);
        let a = stage1(&ds, &fast_config(), 1).unwrap();
        let mut buf = Vec::new();
        a.soft_labels.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,fold,tau,p_0,p_1,p_2,p_3,p_4\n"));
        let back = SoftLabelCache::read_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, a.soft_labels);
    }

    #[test]
    fn ensemble_is_mean_of_members() {
        let ds = small_data(6);
        let a = stage1(&ds, &fast_config(), 1).unwrap();
        let x = &ds.samples[0].features;
        let e = ensemble_predict(&a.fold_students, x, 1.0).unwrap();
        for j in 0..ds.num_classes() {
            let mean: f64 = a
                .fold_students
                .iter()
                .map(|m| predict_proba(m, x, 1.0).unwrap().probs()[j])
                .sum::<f64>()
                / 3.0;
            assert!((e.probs()[j] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn evaluate_checks_dimensions() {
        let ds = small_data(7);
        let wrong = ModelParams::zeros(Arch::Linear, 8, 4).unwrap();
        assert!(evaluate(&wrong, &ds, 1.0).is_err());
        let wrong = ModelParams::zeros(Arch::Linear, 7, 5).unwrap();
        assert!(evaluate(&wrong, &ds, 1.0).is_err());
    }
}
