//! Intrinsic and extrinsic evaluation.
//!
//! Intrinsic: Spearman's rank correlation (average ranks over ties, then
//! Pearson on the ranks) and mean squared error between predicted and
//! human scores. Spearman is the model-selection criterion because serving
//! only needs a monotonic relationship between predictions and quality.
//!
//! Extrinsic: fine-grained annotations from trained raters are collapsed
//! into a binary ExtGood label (majority says at least partially correct
//! AND majority says at least somewhat useful), then precision and recall
//! of ExtGood captions are swept over serving thresholds with a strict
//! `score > threshold` rule, summarized by trapezoidal AUC.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Checkpoint, Sample};
use crate::io_util;
use crate::model::{forward, ForwardMode, ModelConfig, ModelError, ModelParams};

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// 1-based ranks with tied values receiving the mean of their rank range.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        // Mean of the 1-based ranks start+1 ..= end+1.
        let rank = (start + end + 2) as f64 / 2.0;
        for &original in &order[start..=end] {
            ranks[original] = rank;
        }
        start = end + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of the two average-rank vectors.
///
/// Undefined (ConstantVector) when either input has fewer than two
/// distinct values.
pub fn spearman(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    if y.len() != yhat.len() {
        return Err(MetricsError::LengthMismatch {
            left: y.len(),
            right: yhat.len(),
        });
    }
    if y.len() < 2 {
        return Err(MetricsError::TooFewSamples { got: y.len() });
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteInput);
    }
    if is_constant(y) || is_constant(yhat) {
        return Err(MetricsError::ConstantVector);
    }
    let rx = average_ranks(y);
    let ry = average_ranks(yhat);
    Ok(pearson(&rx, &ry))
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    cov / (var_x.sqrt() * var_y.sqrt())
}

// ---------------------------------------------------------------------------
// Fine-grained annotations and ExtGood
// ---------------------------------------------------------------------------

/// Ordinal correctness judgment, least to most correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Correctness {
    Incorrect,
    PartiallyCorrect,
    Correct,
}

/// Ordinal helpfulness judgment, least to most helpful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Helpfulness {
    NotHelpful,
    SomewhatUseful,
    Helpful,
}

macro_rules! ordinal_codes {
    ($ty:ident, [$a:ident, $b:ident, $c:ident]) => {
        impl TryFrom<u8> for $ty {
            type Error = String;
            fn try_from(code: u8) -> Result<Self, String> {
                match code {
                    0 => Ok(Self::$a),
                    1 => Ok(Self::$b),
                    2 => Ok(Self::$c),
                    other => Err(format!(
                        concat!(stringify!($ty), " code {} is not 0, 1 or 2"),
                        other
                    )),
                }
            }
        }
        impl From<$ty> for u8 {
            fn from(value: $ty) -> u8 {
                value as u8
            }
        }
    };
}

ordinal_codes!(Correctness, [Incorrect, PartiallyCorrect, Correct]);
ordinal_codes!(Helpfulness, [NotHelpful, SomewhatUseful, Helpful]);

/// One trained rater's pair of ordinal judgments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterJudgment {
    pub correctness: Correctness,
    pub helpfulness: Helpfulness,
}

/// Exactly three trained raters' judgments for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineGrainedAnnotation {
    pub sample_id: String,
    pub raters: [RaterJudgment; 3],
}

/// A caption is extrinsically good when a majority of the three raters
/// judged it at least partially correct AND a majority judged it at least
/// somewhat useful; the two majorities are counted independently.
pub fn ext_good(annotation: &FineGrainedAnnotation) -> bool {
    let correct = annotation
        .raters
        .iter()
        .filter(|r| r.correctness >= Correctness::PartiallyCorrect)
        .count();
    let helpful = annotation
        .raters
        .iter()
        .filter(|r| r.helpfulness >= Helpfulness::SomewhatUseful)
        .count();
    correct >= 2 && helpful >= 2
}

/// Read fine-grained annotations: one JSON object per line.
pub fn read_annotations_jsonl(path: &Path) -> Result<Vec<FineGrainedAnnotation>, MetricsError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut annotations = Vec::new();
    for item in io_util::numbered_lines(reader) {
        let (line, text) = item?;
        let parsed: FineGrainedAnnotation =
            serde_json::from_str(&text).map_err(|source| MetricsError::Parse { line, source })?;
        annotations.push(parsed);
    }
    Ok(annotations)
}

/// Write fine-grained annotations as jsonl.
pub fn write_annotations_jsonl(
    path: &Path,
    annotations: &[FineGrainedAnnotation],
    overwrite: bool,
) -> Result<(), MetricsError> {
    let mut writer = BufWriter::new(io_util::create_file(path, overwrite)?);
    for annotation in annotations {
        serde_json::to_writer(&mut writer, annotation).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Precision / recall / AUC
// ---------------------------------------------------------------------------

/// Precision and recall of ExtGood captions at one serving threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    /// Absent when nothing is served at this threshold.
    pub precision: Option<f64>,
    pub recall: f64,
    /// Count of samples with score strictly above the threshold.
    pub n_served: usize,
}

fn check_keys(
    scores: &BTreeMap<String, f64>,
    labels: &BTreeMap<String, bool>,
) -> Result<usize, MetricsError> {
    if scores.len() != labels.len() || scores.keys().any(|k| !labels.contains_key(k)) {
        return Err(MetricsError::KeyMismatch);
    }
    let positives = labels.values().filter(|&&good| good).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    Ok(positives)
}

/// Precision/recall at a single threshold by literal indicator counting,
/// with the strict `score > th` serving rule.
pub fn pr_at_threshold(
    scores: &BTreeMap<String, f64>,
    labels: &BTreeMap<String, bool>,
    threshold: f64,
) -> Result<PRPoint, MetricsError> {
    let positives = check_keys(scores, labels)?;
    let mut n_served = 0usize;
    let mut served_good = 0usize;
    for (key, &score) in scores {
        if score > threshold {
            n_served += 1;
            if labels[key] {
                served_good += 1;
            }
        }
    }
    Ok(PRPoint {
        threshold,
        precision: (n_served > 0).then(|| served_good as f64 / n_served as f64),
        recall: served_good as f64 / positives as f64,
        n_served,
    })
}

/// Sweep thresholds over every distinct score value plus one sentinel
/// below the minimum, in decreasing-threshold order.
///
/// Implemented as a single sorted sweep; [`pr_at_threshold`] recomputes
/// any point independently.
pub fn pr_curve(
    scores: &BTreeMap<String, f64>,
    labels: &BTreeMap<String, bool>,
) -> Result<Vec<PRPoint>, MetricsError> {
    let positives = check_keys(scores, labels)?;

    let mut ordered: Vec<(f64, bool)> = scores
        .iter()
        .map(|(key, &score)| (score, labels[key]))
        .collect();
    ordered.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let mut n_served = 0usize;
    let mut served_good = 0usize;
    let mut index = 0;
    while index < ordered.len() {
        let threshold = ordered[index].0;
        // Everything strictly above `threshold` has been accumulated.
        points.push(PRPoint {
            threshold,
            precision: (n_served > 0).then(|| served_good as f64 / n_served as f64),
            recall: served_good as f64 / positives as f64,
            n_served,
        });
        while index < ordered.len() && ordered[index].0 == threshold {
            n_served += 1;
            if ordered[index].1 {
                served_good += 1;
            }
            index += 1;
        }
    }
    // Sentinel below the minimum score serves everything.
    let sentinel = ordered.last().map(|&(s, _)| s - 1.0).unwrap_or(-1.0);
    points.push(PRPoint {
        threshold: sentinel,
        precision: Some(served_good as f64 / n_served as f64),
        recall: served_good as f64 / positives as f64,
        n_served,
    });
    Ok(points)
}

/// Trapezoidal area of precision over recall.
///
/// Points with undefined precision are skipped; the remaining points are
/// sorted by recall and the curve is anchored at recall 0 with the
/// precision of the highest-threshold defined point.
pub fn auc(points: &[PRPoint]) -> Result<f64, MetricsError> {
    let mut defined: Vec<&PRPoint> = points.iter().filter(|p| p.precision.is_some()).collect();
    if defined.len() < 2 {
        return Err(MetricsError::TooFewPoints { got: defined.len() });
    }
    let anchor = defined
        .iter()
        .max_by(|a, b| a.threshold.total_cmp(&b.threshold))
        .expect("non-empty")
        .precision
        .expect("filtered to defined");
    defined.sort_by(|a, b| a.recall.total_cmp(&b.recall));

    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut prev_precision = anchor;
    for point in defined {
        let precision = point.precision.expect("filtered to defined");
        area += (point.recall - prev_recall) * (precision + prev_precision) / 2.0;
        prev_recall = point.recall;
        prev_precision = precision;
    }
    Ok(area)
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

/// Spearman/MSE summary of a scored dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// None when the predictions (or targets) are constant.
    pub spearman: Option<f64>,
    pub mse: f64,
    pub n: usize,
}

/// Summarize already-computed predictions against targets.
pub fn eval_scores(preds: &[f64], targets: &[f64]) -> Result<EvalReport, MetricsError> {
    if preds.len() != targets.len() {
        return Err(MetricsError::LengthMismatch {
            left: preds.len(),
            right: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::TooFewSamples { got: 0 });
    }
    let mse = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    let spearman = match spearman(targets, preds) {
        Ok(rho) => Some(rho),
        Err(MetricsError::ConstantVector) => None,
        Err(other) => return Err(other),
    };
    Ok(EvalReport {
        spearman,
        mse,
        n: preds.len(),
    })
}

/// Score samples in infer mode, in input order.
///
/// Scoring parallelizes over contiguous chunks when the `QE_THREADS`
/// environment variable (0 or unset = auto) allows more than one thread;
/// results are concatenated in order, so the output is identical either
/// way.
pub fn score_samples(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
) -> Result<Vec<f64>, MetricsError> {
    let threads = thread_cap().min(samples.len()).max(1);
    if threads == 1 {
        return samples
            .iter()
            .map(|s| forward(params, config, s, ForwardMode::Infer).map_err(MetricsError::from))
            .collect();
    }
    let chunk_len = samples.len().div_ceil(threads);
    let chunks: Vec<&[Sample]> = samples.chunks(chunk_len).collect();
    let mut scores = Vec::with_capacity(samples.len());
    let results: Vec<Result<Vec<f64>, ModelError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|s| forward(params, config, s, ForwardMode::Infer))
                        .collect::<Result<Vec<f64>, ModelError>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    for result in results {
        scores.extend(result?);
    }
    Ok(scores)
}

/// Number of worker threads allowed by `QE_THREADS` (0 or unset = auto).
pub(crate) fn thread_cap() -> usize {
    let auto = || {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    };
    match std::env::var("QE_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(0) | Err(_) => auto(),
            Ok(n) => n,
        },
        Err(_) => auto(),
    }
}

/// Score labeled samples with a checkpoint and report Spearman, MSE and n.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[Sample]) -> Result<EvalReport, MetricsError> {
    let mut targets = Vec::with_capacity(samples.len());
    for sample in samples {
        targets.push(
            sample
                .target_value()
                .ok_or_else(|| MetricsError::MissingTarget(sample.sample_id.clone()))?,
        );
    }
    let scores = score_samples(&checkpoint.params, &checkpoint.config, samples)?;
    eval_scores(&scores, &targets)
}

// ---------------------------------------------------------------------------
// Model-score files and PR outputs
// ---------------------------------------------------------------------------

/// One model-assigned score, keyed by sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub sample_id: String,
    pub image_id: String,
    pub score: f64,
}

/// Write model scores: one JSON object per line.
pub fn write_model_scores_jsonl(
    path: &Path,
    scores: &[ModelScore],
    overwrite: bool,
) -> Result<(), MetricsError> {
    let mut writer = BufWriter::new(io_util::create_file(path, overwrite)?);
    for score in scores {
        serde_json::to_writer(&mut writer, score).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a model-score file.
pub fn read_model_scores_jsonl(path: &Path) -> Result<Vec<ModelScore>, MetricsError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut scores = Vec::new();
    for item in io_util::numbered_lines(reader) {
        let (line, text) = item?;
        let parsed: ModelScore =
            serde_json::from_str(&text).map_err(|source| MetricsError::Parse { line, source })?;
        scores.push(parsed);
    }
    Ok(scores)
}

/// Write a PR curve as CSV: threshold, precision (empty when undefined),
/// recall, n_served.
pub fn write_pr_csv(path: &Path, points: &[PRPoint], overwrite: bool) -> Result<(), MetricsError> {
    let file = io_util::create_file(path, overwrite)?;
    let mut writer = csv::Writer::from_writer(file);
    for point in points {
        writer.serialize(point).map_err(csv_io_error)?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a PR curve back from CSV.
pub fn read_pr_csv(path: &Path) -> Result<Vec<PRPoint>, MetricsError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_io_error)?;
    let mut points = Vec::new();
    for record in reader.deserialize() {
        points.push(record.map_err(csv_io_error)?);
    }
    Ok(points)
}

fn csv_io_error(err: csv::Error) -> MetricsError {
    MetricsError::Io(std::io::Error::other(err))
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 samples, got {got}")]
    TooFewSamples { got: usize },
    #[error("rank correlation is undefined for a constant vector")]
    ConstantVector,
    #[error("inputs contain non-finite values")]
    NonFiniteInput,
    #[error("scores and labels are keyed by different sample sets")]
    KeyMismatch,
    #[error("no positively-labeled samples")]
    NoPositives,
    #[error("need at least 2 points with defined precision, got {got}")]
    TooFewPoints { got: usize },
    #[error("sample {0} has no target")]
    MissingTarget(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
