//! On-disk layout of a run directory.
//!
//! ```text
//! config.json  foldplan.json  softlabels.csv  dataset.jsonl
//! checkpoints/teacher_k.json  checkpoints/student_stage1_k.json  checkpoints/student_stage2_k.json
//! selection_k.json  selection_k.csv  metrics_stage1.json  metrics_stage2.json
//! sweep.csv  sweep.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, MetricsSummary};
use crate::model::ModelParams;
use crate::selection::SelectionReport;

use super::{summarize_reports, SoftLabelCache, Stage, StageArtifacts, TrainConfig};

/// Contents of `metrics_stage1.json` / `metrics_stage2.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetricsFile {
    pub stage: Stage,
    pub per_fold: Vec<MetricsReport>,
    pub summary: MetricsSummary,
    pub teacher_per_fold: Vec<MetricsReport>,
    pub teacher_summary: MetricsSummary,
    #[serde(default)]
    pub selected_fraction: Option<Vec<f64>>,
    #[serde(default)]
    pub noop_folds: Vec<usize>,
}

impl StageMetricsFile {
    pub fn from_artifacts(a: &StageArtifacts) -> Self {
        StageMetricsFile {
            stage: a.stage,
            per_fold: a.metrics_per_fold.clone(),
            summary: a.summary,
            teacher_per_fold: a.teacher_metrics.clone(),
            teacher_summary: a.teacher_summary(),
            selected_fraction: a.selected_fractions(),
            noop_folds: a.noop_folds.clone(),
        }
    }

    /// Summary recomputed from the stored per-fold reports.
    pub fn recomputed_summary(&self) -> MetricsSummary {
        summarize_reports(&self.per_fold)
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Teacher,
    StudentStage1,
    StudentStage2,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self) -> Result<()> {
        let ckpt = self.root.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn foldplan_path(&self) -> PathBuf {
        self.root.join("foldplan.json")
    }

    pub fn softlabels_path(&self) -> PathBuf {
        self.root.join("softlabels.csv")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn checkpoint_path(&self, kind: CheckpointKind, fold: usize) -> PathBuf {
        let name = match kind {
            CheckpointKind::Teacher => format!("teacher_{fold}.json"),
            CheckpointKind::StudentStage1 => format!("student_stage1_{fold}.json"),
            CheckpointKind::StudentStage2 => format!("student_stage2_{fold}.json"),
        };
        self.root.join("checkpoints").join(name)
    }

    pub fn selection_path(&self, fold: usize) -> PathBuf {
        self.root.join(format!("selection_{fold}.json"))
    }

    pub fn selection_csv_path(&self, fold: usize) -> PathBuf {
        self.root.join(format!("selection_{fold}.csv"))
    }

    pub fn metrics_path(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::One => self.root.join("metrics_stage1.json"),
            Stage::Two => self.root.join("metrics_stage2.json"),
        }
    }

    pub fn sweep_csv_path(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }

    pub fn sweep_json_path(&self) -> PathBuf {
        self.root.join("sweep.json")
    }

    pub fn write_text(&self, path: &Path, text: &str) -> Result<()> {
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_text(&self, path: &Path) -> Result<String> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        fs::read_to_string(path).map_err(|e| Error::io(path, e))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.write_text(path, &text)
    }

    pub fn read_json<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        let text = self.read_text(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save_config(&self, config: &TrainConfig) -> Result<()> {
        self.write_json(&self.config_path(), config)
    }

    pub fn load_config(&self) -> Result<TrainConfig> {
        self.read_json(&self.config_path())
    }

    pub fn save_checkpoint(&self, kind: CheckpointKind, fold: usize, params: &ModelParams) -> Result<()> {
        let mut text = params.to_checkpoint_json();
        text.push('\n');
        self.write_text(&self.checkpoint_path(kind, fold), &text)
    }

    pub fn load_checkpoint(&self, kind: CheckpointKind, fold: usize) -> Result<ModelParams> {
        let path = self.checkpoint_path(kind, fold);
        let text = self.read_text(&path)?;
        ModelParams::from_checkpoint_json(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn save_soft_labels(&self, cache: &SoftLabelCache) -> Result<()> {
        let path = self.softlabels_path();
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        cache.write_csv(file).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn load_soft_labels(&self) -> Result<SoftLabelCache> {
        let path = self.softlabels_path();
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        SoftLabelCache::read_csv(file, &path.display().to_string())
    }

    pub fn save_selection(&self, reports: &[SelectionReport]) -> Result<()> {
        for (k, r) in reports.iter().enumerate() {
            self.write_json(&self.selection_path(k), r)?;
            let path = self.selection_csv_path(k);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            r.write_csv(file).map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                line: 0,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load_metrics(&self, stage: Stage) -> Result<StageMetricsFile> {
        self.read_json(&self.metrics_path(stage))
    }

    /// Writes everything stage one produced.
    pub fn save_stage1(&self, artifacts: &StageArtifacts, config: &TrainConfig) -> Result<()> {
        self.create()?;
        self.save_config(config)?;
        self.write_json(&self.foldplan_path(), &artifacts.fold_plan)?;
        self.save_soft_labels(&artifacts.soft_labels)?;
        for (k, t) in artifacts.fold_teachers.iter().enumerate() {
            self.save_checkpoint(CheckpointKind::Teacher, k, t)?;
        }
        for (k, s) in artifacts.fold_students.iter().enumerate() {
            self.save_checkpoint(CheckpointKind::StudentStage1, k, s)?;
        }
        self.write_json(&self.metrics_path(Stage::One), &StageMetricsFile::from_artifacts(artifacts))
    }

    /// Writes stage-two students, selections and metrics.
    pub fn save_stage2(&self, artifacts: &StageArtifacts) -> Result<()> {
        self.create()?;
        for (k, s) in artifacts.fold_students.iter().enumerate() {
            self.save_checkpoint(CheckpointKind::StudentStage2, k, s)?;
        }
        if let Some(sel) = &artifacts.selection {
            self.save_selection(sel)?;
        }
        self.write_json(&self.metrics_path(Stage::Two), &StageMetricsFile::from_artifacts(artifacts))
    }

    /// Reassembles stage-one artifacts. The soft-label cache is read first so
    /// a run without one fails naming `softlabels.csv`.
    pub fn load_stage1(&self, dataset: &Dataset) -> Result<StageArtifacts> {
        let soft_labels = self.load_soft_labels()?;
        let fold_plan: FoldPlan = self.read_json(&self.foldplan_path())?;
        for s in &dataset.samples {
            if soft_labels.get(&s.id).is_none() {
                return Err(Error::InvalidInput(format!(
                    "{}: no soft label for sample {}",
                    self.softlabels_path().display(),
                    s.id
                )));
            }
        }
        let teachers = (0..fold_plan.k)
            .map(|k| self.load_checkpoint(CheckpointKind::Teacher, k))
            .collect::<Result<Vec<_>>>()?;
        let students = (0..fold_plan.k)
            .map(|k| self.load_checkpoint(CheckpointKind::StudentStage1, k))
            .collect::<Result<Vec<_>>>()?;
        let metrics = self.load_metrics(Stage::One)?;
        Ok(StageArtifacts {
            stage: Stage::One,
            fold_plan,
            fold_teachers: teachers,
            fold_students: students,
            soft_labels,
            selection: None,
            teacher_metrics: metrics.teacher_per_fold,
            summary: metrics.summary,
            metrics_per_fold: metrics.per_fold,
            noop_folds: Vec::new(),
        })
    }
}
