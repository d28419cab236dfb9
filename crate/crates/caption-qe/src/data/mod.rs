//! The embedding-level dataset the QE model consumes, and model checkpoints.
//!
//! A [`Sample`] is one (image, caption) instance reduced to precomputed
//! embeddings: a 64-d image vector, up to [`MAX_LABELS`] object-label
//! vectors of 256 dims each (ordered by detector confidence), and a 512-d
//! sentence vector, plus an optional quality-score target. Samples live in
//! two interchangeable on-disk formats — human-readable jsonl and a packed
//! binary layout for fast loading — that round-trip exactly at 32-bit
//! precision.

mod checkpoint;
mod jsonl;
mod packed;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ratings::QualityScore;

/// Dimension of the global image embedding.
pub const IMAGE_DIM: usize = 64;
/// Dimension of each object-label embedding.
pub const LABEL_DIM: usize = 256;
/// Dimension of the caption sentence embedding.
pub const SENTENCE_DIM: usize = 512;
/// Most object labels a sample may store; models consume the first K by rank.
pub const MAX_LABELS: usize = 20;

/// 64-d global image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding(Vec<f32>);

/// 256-d object-label embedding with its confidence rank (0 = most confident).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedding {
    values: Vec<f32>,
    rank: u32,
}

/// 512-d caption sentence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding(Vec<f32>);

impl ImageEmbedding {
    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

impl LabelEmbedding {
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }
}

impl SentenceEmbedding {
    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// One (image, caption) instance as an embedding triple plus optional target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image_id: String,
    pub image: ImageEmbedding,
    /// Ordered by rank; may be shorter than the model's label budget.
    pub labels: Vec<LabelEmbedding>,
    pub sentence: SentenceEmbedding,
    pub target: Option<QualityScore>,
}

impl Sample {
    /// Build a validated sample from raw vectors. Labels are ranked by
    /// their position in `labels`.
    pub fn from_parts(
        sample_id: impl Into<String>,
        image_id: impl Into<String>,
        image: Vec<f32>,
        labels: Vec<Vec<f32>>,
        sentence: Vec<f32>,
        target: Option<QualityScore>,
    ) -> Result<Self, DataError> {
        let sample_id = sample_id.into();
        check_vector(&sample_id, "image", IMAGE_DIM, &image)?;
        check_vector(&sample_id, "sentence", SENTENCE_DIM, &sentence)?;
        if labels.len() > MAX_LABELS {
            return Err(DataError::TooManyLabels {
                sample_id,
                got: labels.len(),
                max: MAX_LABELS,
            });
        }
        let mut ranked = Vec::with_capacity(labels.len());
        for (rank, values) in labels.into_iter().enumerate() {
            check_vector(&sample_id, "labels", LABEL_DIM, &values)?;
            ranked.push(LabelEmbedding {
                values,
                rank: rank as u32,
            });
        }
        Ok(Self {
            sample_id,
            image_id: image_id.into(),
            image: ImageEmbedding(image),
            labels: ranked,
            sentence: SentenceEmbedding(sentence),
            target,
        })
    }

    /// Target as a float, if present.
    pub fn target_value(&self) -> Option<f64> {
        self.target.map(|t| t.value())
    }
}

fn check_vector(
    sample_id: &str,
    field: &'static str,
    expected: usize,
    values: &[f32],
) -> Result<(), DataError> {
    if values.len() != expected {
        return Err(DataError::DimensionMismatch {
            sample_id: sample_id.to_string(),
            field,
            expected,
            got: values.len(),
        });
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFiniteValue {
            sample_id: sample_id.to_string(),
            field,
            index,
        });
    }
    Ok(())
}

/// On-disk sample representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    /// One JSON object per line; numbers at 32-bit precision.
    Jsonl,
    /// Binary records with little-endian f32 vectors and a JSON offset index.
    Packed,
}

impl FromStr for SampleFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "packed" => Ok(Self::Packed),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

/// Guess a format from the file extension; `.qep` is packed, anything else jsonl.
pub fn format_for_path(path: &Path) -> SampleFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("qep") | Some("packed") => SampleFormat::Packed,
        _ => SampleFormat::Jsonl,
    }
}

/// Load samples from `path`, validating every vector.
pub fn load_samples(path: &Path, format: SampleFormat) -> Result<Vec<Sample>, DataError> {
    match format {
        SampleFormat::Jsonl => jsonl::load(path),
        SampleFormat::Packed => packed::load(path),
    }
}

/// Save samples to `path`. Fails on an existing path unless `overwrite`.
pub fn save_samples(
    samples: &[Sample],
    path: &Path,
    format: SampleFormat,
    overwrite: bool,
) -> Result<(), DataError> {
    match format {
        SampleFormat::Jsonl => jsonl::save(samples, path, overwrite),
        SampleFormat::Packed => packed::save(samples, path, overwrite),
    }
}

/// Partition samples into train/dev/test folds with disjoint image sets.
///
/// The unit of shuffling is the unique `image_id`, so all captions of an
/// image land in the same fold. Fold sizes follow `fractions` applied to
/// the image count. Deterministic given `seed`.
pub fn split_image_disjoint(
    samples: Vec<Sample>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>), DataError> {
    let (f_train, f_dev, f_test) = fractions;
    if f_train <= 0.0 || f_dev <= 0.0 || f_test <= 0.0 {
        return Err(DataError::BadFractions {
            detail: "all fractions must be positive".into(),
        });
    }
    let sum = f_train + f_dev + f_test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions {
            detail: format!("fractions sum to {sum}, expected 1"),
        });
    }

    // Unique image ids in first-appearance order, then a seeded shuffle.
    let mut image_ids = Vec::new();
    let mut seen = BTreeSet::new();
    for sample in &samples {
        if seen.insert(sample.image_id.clone()) {
            image_ids.push(sample.image_id.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image_ids.shuffle(&mut rng);

    let n = image_ids.len();
    let cut_train = (f_train * n as f64).round() as usize;
    let cut_dev = ((f_train + f_dev) * n as f64).round() as usize;
    if cut_train == 0 || cut_dev <= cut_train || cut_dev >= n {
        return Err(DataError::TooFewImages {
            images: n,
            fractions: format!("({f_train}, {f_dev}, {f_test})"),
        });
    }

    let dev_ids: BTreeSet<&str> = image_ids[cut_train..cut_dev]
        .iter()
        .map(String::as_str)
        .collect();
    let test_ids: BTreeSet<&str> = image_ids[cut_dev..].iter().map(String::as_str).collect();

    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for sample in samples {
        if dev_ids.contains(sample.image_id.as_str()) {
            dev.push(sample);
        } else if test_ids.contains(sample.image_id.as_str()) {
            test.push(sample);
        } else {
            train.push(sample);
        }
    }
    Ok((train, dev, test))
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sample {sample_id}: {field} has length {got}, expected {expected}")]
    DimensionMismatch {
        sample_id: String,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sample {sample_id}: {field}[{index}] is not finite")]
    NonFiniteValue {
        sample_id: String,
        field: &'static str,
        index: usize,
    },
    #[error("sample {sample_id}: {got} labels exceeds the maximum of {max}")]
    TooManyLabels {
        sample_id: String,
        got: usize,
        max: usize,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("invalid target score: {0}")]
    BadTarget(#[from] crate::ratings::RatingsError),
    #[error("packed file {path}: {detail}")]
    PackedFormat { path: String, detail: String },
    #[error("unknown sample format {0:?} (expected \"jsonl\" or \"packed\")")]
    UnknownFormat(String),
    #[error("invalid split fractions: {detail}")]
    BadFractions { detail: String },
    #[error("cannot split {images} images with fractions {fractions}: a fold would be empty")]
    TooFewImages { images: usize, fractions: String },
    #[error("checkpoint {path}: corrupt file ({detail})")]
    CorruptCheckpoint { path: String, detail: String },
    #[error("checkpoint {path}: version mismatch ({detail})")]
    VersionMismatch { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn wrong_image_dimension_names_the_sample() {
        let err = Sample::from_parts("s1", "i1", vec![0.0; 63], vec![], vec![0.0; 512], None)
            .unwrap_err();
        match err {
            DataError::DimensionMismatch {
                sample_id,
                field,
                expected,
                got,
            } => {
                assert_eq!(sample_id, "s1");
                assert_eq!(field, "image");
                assert_eq!(expected, 64);
                assert_eq!(got, 63);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let mut image = vec![0.0f32; 64];
        image[10] = f32::NAN;
        let err =
            Sample::from_parts("s", "i", image, vec![], vec![0.0; 512], None).unwrap_err();
        assert!(matches!(
            err,
            DataError::NonFiniteValue { field: "image", index: 10, .. }
        ));
    }

    #[test]
    fn labels_are_ranked_by_position() {
        let sample = Sample::from_parts(
            "s",
            "i",
            vec![0.0; 64],
            vec![vec![1.0; 256], vec![2.0; 256]],
            vec![0.0; 512],
            None,
        )
        .unwrap();
        assert_eq!(sample.labels[0].rank(), 0);
        assert_eq!(sample.labels[1].rank(), 1);
    }

    #[test]
    fn too_many_labels_is_rejected() {
        let labels = vec![vec![0.0f32; 256]; MAX_LABELS + 1];
        let err =
            Sample::from_parts("s", "i", vec![0.0; 64], labels, vec![0.0; 512], None).unwrap_err();
        assert!(matches!(err, DataError::TooManyLabels { got: 21, .. }));
    }

    #[test]
    fn split_ten_images_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Sample> = (0..10)
            .map(|i| {
                testutil::random_sample(&mut rng, &format!("s{i}"), &format!("img{i}"), 0, true)
            })
            .collect();
        let (train, dev, test) = split_image_disjoint(samples, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(dev.len(), 1);
        assert_eq!(test.len(), 1);
    }

    #[test]
    fn split_is_an_image_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 30 images, 1-3 samples each.
        let mut samples = Vec::new();
        for img in 0..30 {
            for cap in 0..rng.random_range(1..=3) {
                samples.push(testutil::random_sample(
                    &mut rng,
                    &format!("s{img}_{cap}"),
                    &format!("img{img}"),
                    2,
                    true,
                ));
            }
        }
        let total = samples.len();
        let (train, dev, test) =
            split_image_disjoint(samples.clone(), (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(train.len() + dev.len() + test.len(), total);
        let ids = |fold: &[Sample]| -> BTreeSet<String> {
            fold.iter().map(|s| s.image_id.clone()).collect()
        };
        let (a, b, c) = (ids(&train), ids(&dev), ids(&test));
        assert!(a.is_disjoint(&b));
        assert!(a.is_disjoint(&c));
        assert!(b.is_disjoint(&c));
        assert_eq!(a.len() + b.len() + c.len(), 30);

        // Same seed reproduces the same partition.
        let (train2, dev2, test2) = split_image_disjoint(samples, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(dev, dev2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_rejects_empty_folds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Sample> = (0..2)
            .map(|i| testutil::random_sample(&mut rng, &format!("s{i}"), &format!("i{i}"), 0, true))
            .collect();
        assert!(matches!(
            split_image_disjoint(samples, (0.8, 0.1, 0.1), 0),
            Err(DataError::TooFewImages { .. })
        ));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(matches!(
            split_image_disjoint(Vec::new(), (0.5, 0.2, 0.2), 0),
            Err(DataError::BadFractions { .. })
        ));
        assert!(matches!(
            split_image_disjoint(Vec::new(), (0.8, 0.2, -0.1), 0),
            Err(DataError::BadFractions { .. })
        ));
    }

    /// Fold sample counts track the requested fractions on a large corpus
    /// shaped like a real dataset (many images, a few captions each).
    #[test]
    fn split_fractions_hold_on_large_synthetic_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // 16k images with 1-5 lightweight pseudo-samples each; building full
        // embedding vectors here would dominate the test, so craft minimal
        // samples directly.
        let mut samples = Vec::new();
        for img in 0..16_000 {
            let n_caps = rng.random_range(1..=5);
            for cap in 0..n_caps {
                samples.push(
                    Sample::from_parts(
                        format!("s{img}_{cap}"),
                        format!("img{img}"),
                        vec![0.0; IMAGE_DIM],
                        vec![],
                        vec![0.0; SENTENCE_DIM],
                        None,
                    )
                    .unwrap(),
                );
            }
        }
        let total = samples.len() as f64;
        let fractions = (0.88, 0.04, 0.08);
        let (train, dev, test) = split_image_disjoint(samples, fractions, 11).unwrap();
        assert!((train.len() as f64 / total - fractions.0).abs() < 0.02);
        assert!((dev.len() as f64 / total - fractions.1).abs() < 0.02);
        assert!((test.len() as f64 / total - fractions.2).abs() < 0.02);
    }
}
