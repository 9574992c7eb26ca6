//! Few-shot classification in the learned space and metric reporting.
//!
//! Queries are assigned the class whose training centroid is nearest in
//! squared Euclidean distance; ties go to the lexicographically smallest
//! label. Reports carry per-class precision, recall and F1, the
//! support-weighted F1, a confusion matrix and wall-clock training time.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Display, Write as _};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_dataset, AugmentError, AugmentedDataset};
use crate::dataset::{stratified_split, Dataset, Label, SplitError, SplitSpec};
use crate::embed::{embed_dataset, ChunkSpec, EmbedError, EmbeddingProvider, EmbeddingStore};
use crate::siamese::{fit, squared_distance, ShapeError, SiameseModel, TrainConfig, TrainError};

pub const DECISION_RULE: &str = "nearest_centroid";

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("no training examples to build centroids from")]
    Empty,
    #[error("class `{0}` has no training members")]
    MissingClass(String),
    #[error("no embedding for test `{0}`")]
    MissingEmbedding(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Error, PartialEq)]
pub enum PredictError {
    #[error("centroid index is empty")]
    EmptyIndex,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("{preds} predictions for {truths} ground-truth labels")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("nothing to score")]
    Empty,
}

/// Per-class mean of encoded training members.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidIndex<L> {
    centroids: BTreeMap<L, Vec<f64>>,
    counts: BTreeMap<L, usize>,
}

impl<L: Ord + Clone> CentroidIndex<L> {
    /// Builds an index from already-encoded points.
    pub fn from_encodings<'a>(
        points: impl IntoIterator<Item = (L, &'a [f64])>,
    ) -> Result<Self, IndexError> {
        let mut sums: BTreeMap<L, Vec<f64>> = BTreeMap::new();
        let mut counts: BTreeMap<L, usize> = BTreeMap::new();
        let mut dim = None;
        for (label, enc) in points {
            let d = *dim.get_or_insert(enc.len());
            if enc.len() != d {
                return Err(ShapeError {
                    expected: d,
                    got: enc.len(),
                }
                .into());
            }
            let sum = sums.entry(label.clone()).or_insert_with(|| vec![0.0; d]);
            for (s, v) in sum.iter_mut().zip(enc) {
                *s += v;
            }
            *counts.entry(label).or_insert(0) += 1;
        }
        if sums.is_empty() {
            return Err(IndexError::Empty);
        }
        for (label, sum) in sums.iter_mut() {
            let n = counts[label] as f64;
            sum.iter_mut().for_each(|s| *s /= n);
        }
        Ok(Self {
            centroids: sums,
            counts,
        })
    }

    pub fn centroid(&self, label: &L) -> Option<&[f64]> {
        self.centroids.get(label).map(Vec::as_slice)
    }

    pub fn count(&self, label: &L) -> usize {
        self.counts.get(label).copied().unwrap_or(0)
    }

    pub fn labels(&self) -> impl Iterator<Item = &L> {
        self.centroids.keys()
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// The label of the nearest centroid; ties go to the smallest label.
    pub fn nearest(&self, encoding: &[f64]) -> Option<&L> {
        let mut best: Option<(&L, f64)> = None;
        for (label, c) in &self.centroids {
            let d = squared_distance(c, encoding);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((label, d));
            }
        }
        best.map(|(l, _)| l)
    }
}

impl<L: Ord + Clone + Display> CentroidIndex<L> {
    /// Errors if any of `classes` has no centroid.
    pub fn ensure_covers<'a>(
        &self,
        classes: impl IntoIterator<Item = &'a L>,
    ) -> Result<(), IndexError>
    where
        L: 'a,
    {
        for c in classes {
            if !self.centroids.contains_key(c) {
                return Err(IndexError::MissingClass(c.to_string()));
            }
        }
        Ok(())
    }
}

/// Encodes every training example with `model` and averages per class.
pub fn build_centroids<L: Ord + Clone>(
    model: &SiameseModel,
    store: &EmbeddingStore,
    train: &[(String, L)],
) -> Result<CentroidIndex<L>, IndexError> {
    let encoded = train
        .iter()
        .map(|(id, label)| {
            let x = store
                .get(id)
                .ok_or_else(|| IndexError::MissingEmbedding(id.clone()))?;
            Ok((label.clone(), model.encode(x.as_slice())?))
        })
        .collect::<Result<Vec<_>, IndexError>>()?;
    CentroidIndex::from_encodings(encoded.iter().map(|(l, e)| (l.clone(), e.as_slice())))
}

/// Classifies one input vector.
pub fn predict<L: Ord + Clone>(
    model: &SiameseModel,
    index: &CentroidIndex<L>,
    x: &[f32],
) -> Result<L, PredictError> {
    let enc = model.encode(x)?;
    index.nearest(&enc).cloned().ok_or(PredictError::EmptyIndex)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Metrics for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by label token.
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub weighted_avg_f1: f64,
    /// Row/column order of `confusion`.
    pub labels: Vec<String>,
    /// Rows are ground truth, columns are predictions.
    pub confusion: Vec<Vec<usize>>,
    pub train_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_seconds: Option<f64>,
    pub decision_rule: String,
    pub seed: Option<u64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores predictions against ground truth. Undefined ratios (0/0) are 0.
pub fn score<L: Ord + Clone + Display>(
    preds: &[L],
    truths: &[L],
) -> Result<EvalReport, ScoreError> {
    if preds.len() != truths.len() {
        return Err(ScoreError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(ScoreError::Empty);
    }
    let labels: Vec<&L> = preds
        .iter()
        .chain(truths)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos = |l: &L| labels.binary_search(&l).expect("label collected above");
    let k = labels.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, t) in preds.iter().zip(truths) {
        confusion[pos(t)][pos(p)] += 1;
    }

    let mut per_class = BTreeMap::new();
    let mut weighted = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let tp = confusion[i][i];
        let support: usize = confusion[i].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[i]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted += support as f64 * f1;
        per_class.insert(
            label.to_string(),
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            },
        );
    }
    Ok(EvalReport {
        per_class,
        weighted_avg_f1: weighted / truths.len() as f64,
        labels: labels.iter().map(|l| l.to_string()).collect(),
        confusion,
        train_seconds: None,
        embed_seconds: None,
        decision_rule: DECISION_RULE.to_string(),
        seed: None,
    })
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

impl EvalReport {
    pub fn total_support(&self) -> usize {
        self.per_class.values().map(|m| m.support).sum()
    }

    /// Per-class table with a weighted-average footer; values in percent.
    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "### {title}\n");
        let _ = writeln!(out, "| Class | Support | Precision | Recall | F1 |");
        let _ = writeln!(out, "|---|---:|---:|---:|---:|");
        for (label, m) in &self.per_class {
            let _ = writeln!(
                out,
                "| {label} | {} | {} | {} | {} |",
                m.support,
                pct(m.precision),
                pct(m.recall),
                pct(m.f1)
            );
        }
        let _ = writeln!(
            out,
            "| **Total/Weighted Avg.** | {} | | | {} |",
            self.total_support(),
            pct(self.weighted_avg_f1)
        );
        let _ = writeln!(out, "\nConfusion (rows = truth, columns = predicted):\n");
        let _ = writeln!(out, "| | {} |", self.labels.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(self.labels.len()));
        for (label, row) in self.labels.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "| {label} | {} |", cells.join(" | "));
        }
        let mut footer = format!("\nDecision rule: `{}`", self.decision_rule);
        if let Some(seed) = self.seed {
            let _ = write!(footer, ", seed {seed}");
        }
        if let Some(t) = self.train_seconds {
            let _ = write!(footer, ", training time {t:.2} s");
        }
        out.push_str(&footer);
        out.push('\n');
        out
    }
}

/// Where input vectors come from.
pub enum EmbeddingSource<'a> {
    /// Pre-computed vectors keyed by test id.
    Store(&'a EmbeddingStore),
    /// Encode sources on the fly.
    Provider {
        provider: &'a dyn EmbeddingProvider,
        chunk: ChunkSpec,
    },
}

/// How large a generated augmentation should be.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentTarget {
    /// Absolute size of the augmented training partition.
    Total(usize),
    /// Augmented size as a multiple of the training partition.
    Ratio(f64),
}

/// Training-partition augmentation. The test partition is never augmented.
#[derive(Clone, Debug, Default)]
pub enum Augmentation {
    #[default]
    None,
    /// Mutate training tests into new variants.
    Generate { target: AugmentTarget, seed: u64 },
    /// Use variants from an augmented file; only those whose parent lands
    /// in the training partition are kept.
    Precomputed(AugmentedDataset),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub split: SplitSpec,
    pub augmentation: Augmentation,
    pub train: TrainConfig,
    /// Record wall-clock times in the report. Off gives byte-stable reports.
    pub record_timing: bool,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("split stage: {0}")]
    Split(#[from] SplitError),
    #[error("augment stage: {0}")]
    Augment(#[from] AugmentError),
    #[error("embed stage: {0}")]
    Embed(#[from] EmbedError),
    #[error("train stage: {0}")]
    Train(#[from] TrainError),
    #[error("index stage: {0}")]
    Index(#[from] IndexError),
    #[error("predict stage: {0}")]
    Predict(#[from] PredictError),
    #[error("score stage: {0}")]
    Score(#[from] ScoreError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectResult {
    pub project: String,
    pub support: usize,
    pub weighted_avg_f1: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedProject {
    pub project: String,
    pub reason: String,
}

/// Outcome of a full pipeline run.
///
/// Serializes as the overall [`EvalReport`] fields plus per-project rows
/// (per-project mode only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    #[serde(flatten)]
    pub overall: EvalReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub projects: Vec<ProjectResult>,
    /// Support-weighted mean of per-project weighted F1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_weighted_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedProject>,
    #[serde(default)]
    pub train_size: usize,
    #[serde(default)]
    pub test_ids: Vec<String>,
}

impl ExperimentReport {
    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = String::new();
        if !self.projects.is_empty() {
            let _ = writeln!(out, "### {title}: per project\n");
            let _ = writeln!(out, "| Project | Support | F1 |");
            let _ = writeln!(out, "|---|---:|---:|");
            for p in &self.projects {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} |",
                    p.project,
                    p.support,
                    pct(p.weighted_avg_f1)
                );
            }
            let support: usize = self.projects.iter().map(|p| p.support).sum();
            let _ = writeln!(
                out,
                "| **Total/Weighted Avg.** | {support} | {} |",
                pct(self.project_weighted_f1.unwrap_or(0.0))
            );
            for s in &self.skipped {
                let _ = writeln!(out, "\nSkipped `{}`: {}", s.project, s.reason);
            }
            out.push('\n');
        }
        out.push_str(&self.overall.to_markdown(title));
        out
    }
}

struct RunOutput {
    preds: Vec<Label>,
    truths: Vec<Label>,
    test_ids: Vec<String>,
    train_size: usize,
    train_seconds: f64,
    embed_seconds: f64,
}

/// Splits `d` and augments the training side. Returns (train, test); the
/// test partition only ever holds original tests.
pub fn prepare_partitions(
    d: &Dataset,
    split: &SplitSpec,
    augmentation: &Augmentation,
) -> Result<(Dataset, Dataset), ExperimentError> {
    let split = SplitSpec {
        group_by_project: false,
        ..*split
    };
    let (train, test) = stratified_split(d, &split)?;
    let train_set = match augmentation {
        Augmentation::None => train,
        Augmentation::Generate { target, seed } => {
            let total = match *target {
                AugmentTarget::Total(n) => n,
                AugmentTarget::Ratio(r) => ((train.len() as f64) * r).round() as usize,
            };
            augment_dataset(&train, total.max(train.len()), *seed)?.to_dataset()
        }
        Augmentation::Precomputed(aug) => {
            let parents: HashSet<&str> = train.tests().iter().map(|t| t.id.as_str()).collect();
            let mut tests = train.tests().to_vec();
            tests.extend(aug.variants_of(&parents).map(|v| v.to_test()));
            Dataset::new(train.taxonomy(), tests)
                .map_err(|e| AugmentError::Inconsistent(e.to_string()))?
        }
    };
    Ok((train_set, test))
}

fn run_single(
    d: &Dataset,
    source: &EmbeddingSource<'_>,
    cfg: &ExperimentConfig,
) -> Result<RunOutput, ExperimentError> {
    let (train_set, test) = prepare_partitions(d, &cfg.split, &cfg.augmentation)?;

    let embed_started = Instant::now();
    let owned;
    let store = match source {
        EmbeddingSource::Store(s) => *s,
        EmbeddingSource::Provider { provider, chunk } => {
            let all = Dataset::new(
                d.taxonomy(),
                train_set
                    .tests()
                    .iter()
                    .chain(test.tests())
                    .cloned()
                    .collect(),
            )
            .map_err(|e| AugmentError::Inconsistent(e.to_string()))?;
            owned = embed_dataset(&all, *provider, chunk)?;
            &owned
        }
    };
    let embed_seconds = embed_started.elapsed().as_secs_f64();

    let train_labeled = train_set.labeled_ids();
    let started = Instant::now();
    let (model, _log) = fit(store, &train_labeled, &cfg.train)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let index = build_centroids(&model, store, &train_labeled)?;
    index.ensure_covers(test.tests().iter().map(|t| &t.label))?;
    let mut preds = Vec::with_capacity(test.len());
    for t in test.tests() {
        let x = store
            .get(&t.id)
            .ok_or_else(|| TrainError::MissingEmbedding(t.id.clone()))?;
        preds.push(predict(&model, &index, x.as_slice())?);
    }
    Ok(RunOutput {
        preds,
        truths: test.tests().iter().map(|t| t.label).collect(),
        test_ids: test.tests().iter().map(|t| t.id.clone()).collect(),
        train_size: train_set.len(),
        train_seconds,
        embed_seconds,
    })
}

fn stamp(report: &mut EvalReport, cfg: &ExperimentConfig, train_s: f64, embed_s: Option<f64>) {
    report.seed = Some(cfg.train.seed);
    if cfg.record_timing {
        report.train_seconds = Some(train_s);
        report.embed_seconds = embed_s;
    }
}

/// Runs split → (augment) → embed → train → centroids → predict → score.
///
/// With `cfg.split.group_by_project`, every project runs the pipeline on its
/// own; projects with fewer than two classes are skipped and listed. The
/// overall report then scores the pooled predictions, and
/// `project_weighted_f1` is the support-weighted mean of project scores.
pub fn run_experiment(
    d: &Dataset,
    source: &EmbeddingSource<'_>,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport, ExperimentError> {
    let embed_timing = |s: f64| matches!(source, EmbeddingSource::Provider { .. }).then_some(s);
    if !cfg.split.group_by_project {
        let run = run_single(d, source, cfg)?;
        let mut overall = score(&run.preds, &run.truths)?;
        stamp(
            &mut overall,
            cfg,
            run.train_seconds,
            embed_timing(run.embed_seconds),
        );
        return Ok(ExperimentReport {
            overall,
            projects: Vec::new(),
            project_weighted_f1: None,
            skipped: Vec::new(),
            train_size: run.train_size,
            test_ids: run.test_ids,
        });
    }

    let mut projects = Vec::new();
    let mut skipped = Vec::new();
    let (mut preds, mut truths, mut test_ids) = (Vec::new(), Vec::new(), Vec::new());
    let (mut train_size, mut train_s, mut embed_s) = (0, 0.0, 0.0);
    for name in d.projects() {
        let sub = d.project(&name);
        let classes = sub.class_counts().len();
        if classes < 2 {
            skipped.push(SkippedProject {
                project: name,
                reason: format!("{classes} class(es); triplets need at least two"),
            });
            continue;
        }
        let run = run_single(&sub, source, cfg)?;
        let mut report = score(&run.preds, &run.truths)?;
        stamp(
            &mut report,
            cfg,
            run.train_seconds,
            embed_timing(run.embed_seconds),
        );
        projects.push(ProjectResult {
            project: name,
            support: run.truths.len(),
            weighted_avg_f1: report.weighted_avg_f1,
            report,
        });
        preds.extend(run.preds);
        truths.extend(run.truths);
        test_ids.extend(run.test_ids);
        train_size += run.train_size;
        train_s += run.train_seconds;
        embed_s += run.embed_seconds;
    }
    let mut overall = score(&preds, &truths)?;
    stamp(&mut overall, cfg, train_s, embed_timing(embed_s));
    let support: usize = projects.iter().map(|p| p.support).sum();
    let project_weighted_f1 = projects
        .iter()
        .map(|p| p.support as f64 * p.weighted_avg_f1)
        .sum::<f64>()
        / support as f64;
    Ok(ExperimentReport {
        overall,
        projects,
        project_weighted_f1: Some(project_weighted_f1),
        skipped,
        train_size,
        test_ids,
    })
}

/// Evaluates a trained model: centroids from `train`, predictions on `test`.
pub fn evaluate_model(
    model: &SiameseModel,
    store: &EmbeddingStore,
    train: &Dataset,
    test: &Dataset,
) -> Result<EvalReport, ExperimentError> {
    if store.dim() != model.input_dim() {
        return Err(IndexError::Shape(ShapeError {
            expected: model.input_dim(),
            got: store.dim(),
        })
        .into());
    }
    let index = build_centroids(model, store, &train.labeled_ids())?;
    index.ensure_covers(test.tests().iter().map(|t| &t.label))?;
    let mut preds = Vec::with_capacity(test.len());
    for t in test.tests() {
        let x = store
            .get(&t.id)
            .ok_or_else(|| IndexError::MissingEmbedding(t.id.clone()))?;
        preds.push(predict(model, &index, x.as_slice())?);
    }
    let truths: Vec<Label> = test.tests().iter().map(|t| t.label).collect();
    Ok(score(&preds, &truths)?)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "weighted F1 {:.4} over {} tests ({} classes)",
            self.weighted_avg_f1,
            self.total_support(),
            self.per_class.len()
        )
    }
}
