//! Datasets: JSONL ingestion, hashed featurization, stratified folds and a
//! synthetic long-tail noisy-label generator.

mod featurize;
mod folds;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use featurize::{featurize, featurize_text, MIN_FEATURE_DIM};
pub use folds::{stratified_kfold, FoldPlan};
pub use synth::{synth_generate, SynthConfig};

/// One JSONL record before featurization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub text_fields: Vec<String>,
    pub label_name: String,
    pub meta: BTreeMap<String, String>,
    /// Precomputed feature vector, used verbatim instead of hashing text.
    pub features: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Ordered class names; index <-> name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "label space needs at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::InvalidInput("empty label name".into()));
            }
            if !seen.insert(n) {
                return Err(Error::InvalidInput(format!("duplicate label name {n:?}")));
            }
        }
        Ok(LabelSpace { names })
    }

    /// Observed names sorted lexicographically. May hold fewer than two names.
    pub fn from_observed<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = names.into_iter().collect();
        LabelSpace {
            names: set.into_iter().map(String::from).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }
}

#[derive(Deserialize)]
struct JsonlLine {
    id: String,
    #[serde(default, alias = "QuestionText")]
    question: Option<String>,
    #[serde(default, alias = "MC_Answer")]
    answer: Option<String>,
    #[serde(default, alias = "StudentExplanation")]
    explanation: Option<String>,
    label: String,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    features: Option<Vec<f64>>,
}

/// Reads newline-delimited JSON records.
///
/// Without a fixed `label_space` the space is built from the observed labels
/// in lexicographic order. Blank lines are skipped.
pub fn ingest_jsonl<R: BufRead>(
    reader: R,
    source_name: &str,
    label_space: Option<&LabelSpace>,
) -> Result<(Vec<RawRecord>, LabelSpace)> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            source_name: source_name.into(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            source_name: source_name.into(),
            line: line_no,
            message,
        };
        let raw: JsonlLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if raw.label.is_empty() {
            return Err(parse_err("empty label".into()));
        }
        let text_fields: Vec<String> = [raw.question, raw.answer, raw.explanation]
            .into_iter()
            .flatten()
            .collect();
        if text_fields.is_empty() && raw.features.is_none() {
            return Err(parse_err(format!(
                "record {:?} has no text field and no features",
                raw.id
            )));
        }
        if let Some(f) = &raw.features {
            if f.is_empty() || f.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(format!("record {:?}: invalid features", raw.id)));
            }
        }
        if let Some(space) = label_space {
            if space.index_of(&raw.label).is_none() {
                return Err(Error::UnknownLabel {
                    label: raw.label,
                    line: line_no,
                });
            }
        }
        if !ids.insert(raw.id.clone()) {
            return Err(Error::DuplicateId(raw.id));
        }
        let meta = raw
            .meta
            .into_iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, s)
            })
            .collect();
        records.push(RawRecord {
            id: raw.id,
            text_fields,
            label_name: raw.label,
            meta,
            features: raw.features,
        });
    }
    let space = match label_space {
        Some(s) => s.clone(),
        None => LabelSpace::from_observed(records.iter().map(|r| r.label_name.as_str())),
    };
    Ok((records, space))
}

/// Featurized samples with their label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub labels: LabelSpace,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, labels: LabelSpace) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset is empty".into()))?;
        let dim = first.features.len();
        let mut ids = HashSet::new();
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "sample {}: {} features, expected {dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("sample {}: non-finite feature", s.id)));
            }
            if s.label >= labels.len() {
                return Err(Error::InvalidInput(format!(
                    "sample {}: label {} outside {} classes",
                    s.id,
                    s.label,
                    labels.len()
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Dataset { samples, labels })
    }

    pub fn from_records(records: &[RawRecord], labels: LabelSpace, dim: usize) -> Result<Self> {
        let samples = records
            .iter()
            .map(|r| featurize(r, dim, &labels))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, labels)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.samples[0].features.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&Sample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Loads a JSONL dataset; text records are hashed into `dim` features.
    pub fn load_jsonl(path: &Path, dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let (records, labels) = ingest_jsonl(BufReader::new(file), &name, None)?;
        if records.is_empty() {
            return Err(Error::InvalidInput(format!("{name}: no records")));
        }
        let labels = LabelSpace::new(labels.names().to_vec())?;
        Dataset::from_records(&records, labels, dim)
    }

    /// One `{"id", "label", "features"}` object per line.
    pub fn write_jsonl<W: Write>(&self, writer: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            label: &'a str,
            features: &'a [f64],
        }
        let mut w = BufWriter::new(writer);
        for s in &self.samples {
            let line = Line {
                id: &s.id,
                label: self.labels.name(s.label).expect("label index validated"),
                features: &s.features,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(file).map_err(|e| Error::io(path, e))
    }
}
