//! Crowdsourced rating aggregation and rating-stability analysis.
//!
//! Raw data is a list of per-rater YES/NO/SKIP judgments for each
//! (image, caption) pair. Aggregation turns those into a single quality
//! score quantized to eighths: samples with too many SKIPs are filtered
//! out, and the YES-rate of the remaining ratings is rounded to the
//! nearest k/8. All score arithmetic is exact integer arithmetic so the
//! quantization invariant (`value * 8` is an integer) holds bitwise.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io_util;

/// One rater's judgment of an (image, caption) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Rating {
    Yes,
    No,
    Skip,
}

/// All collected ratings for one (image, caption) pair.
///
/// The `(image_id, caption_id)` pair is the record's key and must be unique
/// within a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub image_id: String,
    pub caption_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub ratings: Vec<Rating>,
}

/// Most ratings a single record may carry; the collection protocol gathers 10.
pub const MAX_RATINGS_PER_RECORD: usize = 20;

impl RatingRecord {
    /// Check the record invariants: non-empty ratings list, at most
    /// [`MAX_RATINGS_PER_RECORD`] entries.
    pub fn validate(&self) -> Result<(), RatingsError> {
        if self.ratings.is_empty() {
            return Err(RatingsError::MalformedRecord {
                image_id: self.image_id.clone(),
                caption_id: self.caption_id.clone(),
                reason: "empty ratings list".into(),
            });
        }
        if self.ratings.len() > MAX_RATINGS_PER_RECORD {
            return Err(RatingsError::MalformedRecord {
                image_id: self.image_id.clone(),
                caption_id: self.caption_id.clone(),
                reason: format!(
                    "{} ratings exceeds the maximum of {}",
                    self.ratings.len(),
                    MAX_RATINGS_PER_RECORD
                ),
            });
        }
        Ok(())
    }
}

/// An aggregated human quality score, quantized to eighths.
///
/// The value is stored as an integer numerator over 8, so `value() * 8.0`
/// is always exactly an integer. `n_valid` is the number of non-SKIP
/// ratings behind the score; it is `None` for scores read back from files
/// that do not carry it (e.g. sample targets).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QualityScore {
    eighths: u8,
    n_valid: Option<u32>,
}

impl QualityScore {
    /// Build from a numerator in `0..=8`.
    pub fn from_eighths(eighths: u8, n_valid: Option<u32>) -> Result<Self, RatingsError> {
        if eighths > 8 {
            return Err(RatingsError::InvalidScore(f64::from(eighths) / 8.0));
        }
        Ok(Self { eighths, n_valid })
    }

    /// Build from a float that must be exactly `k/8` for `k` in `0..=8`.
    pub fn from_value(value: f64) -> Result<Self, RatingsError> {
        let scaled = value * 8.0;
        if !(0.0..=8.0).contains(&scaled) || scaled.fract() != 0.0 {
            return Err(RatingsError::InvalidScore(value));
        }
        Ok(Self {
            eighths: scaled as u8,
            n_valid: None,
        })
    }

    /// The score as a float in `{0, 1/8, ..., 1}`.
    pub fn value(&self) -> f64 {
        f64::from(self.eighths) / 8.0
    }

    /// Numerator of the score over 8.
    pub fn eighths(&self) -> u8 {
        self.eighths
    }

    /// Number of non-SKIP ratings the score was aggregated from, if known.
    pub fn n_valid(&self) -> Option<u32> {
        self.n_valid
    }

    /// True when the score was aggregated from fewer non-SKIP ratings than
    /// the collection protocol guarantees (8 of the 10 collected).
    pub fn below_protocol_count(&self) -> bool {
        matches!(self.n_valid, Some(n) if n < 8)
    }
}

impl fmt::Display for QualityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/8", self.eighths)
    }
}

/// Why a record was dropped during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    /// More SKIP ratings than `max_skips` allows.
    TooManySkips,
    /// Every rating was SKIP, so there is nothing to average.
    AllSkipped,
}

/// Result of aggregating one record: either a score or a filter decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregateOutcome {
    Scored(QualityScore),
    Filtered { reason: FilterReason, skips: usize },
}

/// Aggregate one record's ratings into a quality score.
///
/// Records with more than `max_skips` SKIP ratings are filtered. Over the
/// remaining ratings, YES counts as 1 and NO as 0, and the mean is rounded
/// to the nearest eighth. Rounding is round-half-away-from-zero; for the
/// protocol's 8-10 valid ratings the mean times 8 is never exactly
/// half-integral, so the choice of half rule cannot affect protocol data.
pub fn aggregate_sample(
    ratings: &[Rating],
    max_skips: usize,
) -> Result<AggregateOutcome, RatingsError> {
    if ratings.is_empty() {
        return Err(RatingsError::EmptyRatings);
    }
    let skips = ratings.iter().filter(|r| **r == Rating::Skip).count();
    if skips > max_skips {
        return Ok(AggregateOutcome::Filtered {
            reason: FilterReason::TooManySkips,
            skips,
        });
    }
    let n_valid = ratings.len() - skips;
    if n_valid == 0 {
        return Ok(AggregateOutcome::Filtered {
            reason: FilterReason::AllSkipped,
            skips,
        });
    }
    let yes = ratings.iter().filter(|r| **r == Rating::Yes).count();
    // round(8 * yes / n_valid), half away from zero, in exact integers:
    // floor((16 * yes + n_valid) / (2 * n_valid)).
    let eighths = ((16 * yes + n_valid) / (2 * n_valid)) as u8;
    Ok(AggregateOutcome::Scored(QualityScore {
        eighths,
        n_valid: Some(n_valid as u32),
    }))
}

/// One aggregated score keyed by its (image, caption) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCaption {
    pub image_id: String,
    pub caption_id: String,
    pub score: QualityScore,
}

/// One filtered record, kept for the filter log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterLogEntry {
    pub image_id: String,
    pub caption_id: String,
    pub skips: usize,
    pub reason: FilterReason,
}

/// Output of [`aggregate_dataset`]: scores in input order plus the filter log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregateSummary {
    pub scores: Vec<ScoredCaption>,
    pub filtered: Vec<FilterLogEntry>,
}

/// Aggregate a whole dataset of rating records.
///
/// Records are processed independently in input order; `(image_id,
/// caption_id)` keys must be unique.
pub fn aggregate_dataset(
    records: impl IntoIterator<Item = RatingRecord>,
    max_skips: usize,
) -> Result<AggregateSummary, RatingsError> {
    let mut seen = HashSet::new();
    let mut summary = AggregateSummary::default();
    for record in records {
        record.validate()?;
        if !seen.insert((record.image_id.clone(), record.caption_id.clone())) {
            return Err(RatingsError::DuplicateKey {
                image_id: record.image_id,
                caption_id: record.caption_id,
            });
        }
        match aggregate_sample(&record.ratings, max_skips)? {
            AggregateOutcome::Scored(score) => summary.scores.push(ScoredCaption {
                image_id: record.image_id,
                caption_id: record.caption_id,
                score,
            }),
            AggregateOutcome::Filtered { reason, skips } => {
                summary.filtered.push(FilterLogEntry {
                    image_id: record.image_id,
                    caption_id: record.caption_id,
                    skips,
                    reason,
                })
            }
        }
    }
    Ok(summary)
}

/// Agreement statistics between two scorings of the same captions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub n_pairs: usize,
    pub mean_diff: f64,
    /// Population standard deviation of the score differences.
    pub std_diff: f64,
    /// Fraction of pairs with |difference| <= 0.25.
    pub frac_within_quarter: f64,
}

/// Compare two score maps over their shared keys.
///
/// Differences are `a - b`; the report carries their mean, population
/// standard deviation, and the fraction within 0.25 of zero.
pub fn stability_report<K: Ord>(
    scores_a: &std::collections::BTreeMap<K, QualityScore>,
    scores_b: &std::collections::BTreeMap<K, QualityScore>,
) -> Result<StabilityReport, RatingsError> {
    let diffs: Vec<f64> = scores_a
        .iter()
        .filter_map(|(key, a)| scores_b.get(key).map(|b| a.value() - b.value()))
        .collect();
    if diffs.is_empty() {
        return Err(RatingsError::NoOverlap);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let within = diffs.iter().filter(|d| d.abs() <= 0.25).count();
    Ok(StabilityReport {
        n_pairs: diffs.len(),
        mean_diff: mean,
        std_diff: var.sqrt(),
        frac_within_quarter: within as f64 / n,
    })
}

/// Simulate one rating round: each of `n_raters` independently SKIPs with
/// probability `skip_prob`, otherwise answers YES with probability `p_true`.
pub fn simulate_rater_process(
    p_true: f64,
    n_raters: usize,
    skip_prob: f64,
    rng_seed: u64,
) -> Result<Vec<Rating>, RatingsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    simulate_rater_process_with(p_true, n_raters, skip_prob, &mut rng)
}

/// [`simulate_rater_process`] drawing from a caller-owned RNG, for callers
/// simulating many rounds from one stream.
pub fn simulate_rater_process_with(
    p_true: f64,
    n_raters: usize,
    skip_prob: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Rating>, RatingsError> {
    if !(0.0..=1.0).contains(&p_true) {
        return Err(RatingsError::InvalidProbability {
            name: "p_true",
            value: p_true,
        });
    }
    if !(0.0..1.0).contains(&skip_prob) {
        return Err(RatingsError::InvalidProbability {
            name: "skip_prob",
            value: skip_prob,
        });
    }
    Ok((0..n_raters)
        .map(|_| {
            if skip_prob > 0.0 && rng.random::<f64>() < skip_prob {
                Rating::Skip
            } else if rng.random::<f64>() < p_true {
                Rating::Yes
            } else {
                Rating::No
            }
        })
        .collect())
}

#[derive(Debug, Error)]
pub enum RatingsError {
    #[error("ratings list is empty")]
    EmptyRatings,
    #[error("duplicate key ({image_id}, {caption_id})")]
    DuplicateKey { image_id: String, caption_id: String },
    #[error("no overlapping keys between the two score sets")]
    NoOverlap,
    #[error("{name} = {value} is outside its valid range")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("score {0} is not a multiple of 1/8 in [0, 1]")]
    InvalidScore(f64),
    #[error("record ({image_id}, {caption_id}) is malformed: {reason}")]
    MalformedRecord {
        image_id: String,
        caption_id: String,
        reason: String,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// File formats: ratings jsonl and scores jsonl
// ---------------------------------------------------------------------------

/// Wire form of one line of a scores file.
#[derive(Debug, Serialize, Deserialize)]
struct ScoreLine {
    image_id: String,
    caption_id: String,
    score: f32,
    n_valid: u32,
}

/// Read a ratings file: one JSON record per line.
pub fn read_ratings_jsonl(path: &Path) -> Result<Vec<RatingRecord>, RatingsError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for item in io_util::numbered_lines(reader) {
        let (line, text) = item?;
        let record: RatingRecord =
            serde_json::from_str(&text).map_err(|source| RatingsError::Parse { line, source })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Write aggregated scores: one JSON object per line with the exact k/8
/// value and the count of ratings behind it.
pub fn write_scores_jsonl(
    path: &Path,
    scores: &[ScoredCaption],
    overwrite: bool,
) -> Result<(), RatingsError> {
    let mut writer = BufWriter::new(io_util::create_file(path, overwrite)?);
    for scored in scores {
        let line = ScoreLine {
            image_id: scored.image_id.clone(),
            caption_id: scored.caption_id.clone(),
            score: scored.score.value() as f32,
            n_valid: scored.score.n_valid().unwrap_or(0),
        };
        serde_json::to_writer(&mut writer, &line).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a scores file back into per-caption scores.
pub fn read_scores_jsonl(path: &Path) -> Result<Vec<ScoredCaption>, RatingsError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut scores = Vec::new();
    for item in io_util::numbered_lines(reader) {
        let (line, text) = item?;
        let parsed: ScoreLine =
            serde_json::from_str(&text).map_err(|source| RatingsError::Parse { line, source })?;
        let mut score = QualityScore::from_value(f64::from(parsed.score))?;
        score.n_valid = Some(parsed.n_valid);
        scores.push(ScoredCaption {
            image_id: parsed.image_id,
            caption_id: parsed.caption_id,
            score,
        });
    }
    Ok(scores)
}

/// Index a score list by its (image_id, caption_id) key, e.g. for
/// [`stability_report`].
pub fn scores_by_key(
    scores: &[ScoredCaption],
) -> std::collections::BTreeMap<(String, String), QualityScore> {
    scores
        .iter()
        .map(|s| ((s.image_id.clone(), s.caption_id.clone()), s.score))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn ratings(yes: usize, no: usize, skip: usize) -> Vec<Rating> {
        let mut v = vec![Rating::Yes; yes];
        v.extend(std::iter::repeat_n(Rating::No, no));
        v.extend(std::iter::repeat_n(Rating::Skip, skip));
        v
    }

    fn score_of(outcome: AggregateOutcome) -> QualityScore {
        match outcome {
            AggregateOutcome::Scored(s) => s,
            other => panic!("expected a score, got {other:?}"),
        }
    }

    #[test]
    fn all_yes_aggregates_to_one() {
        let s = score_of(aggregate_sample(&ratings(10, 0, 0), 2).unwrap());
        assert_eq!(s.value(), 1.0);
        assert_eq!(s.n_valid(), Some(10));
    }

    #[test]
    fn eight_yes_two_no_rounds_down_to_six_eighths() {
        // mean 0.8 -> 6.4 -> 6 -> 0.75
        let s = score_of(aggregate_sample(&ratings(8, 2, 0), 2).unwrap());
        assert_eq!(s.eighths(), 6);
        assert_eq!(s.value(), 0.75);
        assert_eq!(s.n_valid(), Some(10));
    }

    #[test]
    fn three_skips_are_filtered() {
        let outcome = aggregate_sample(&ratings(4, 3, 3), 2).unwrap();
        assert_eq!(
            outcome,
            AggregateOutcome::Filtered {
                reason: FilterReason::TooManySkips,
                skips: 3
            }
        );
    }

    #[test]
    fn nine_valid_five_yes_rounds_to_half() {
        // 5/9 * 8 = 4.444 -> 4 -> 0.5
        let s = score_of(aggregate_sample(&ratings(5, 4, 1), 2).unwrap());
        assert_eq!(s.eighths(), 4);
        assert_eq!(s.n_valid(), Some(9));
    }

    #[test]
    fn all_skip_within_budget_is_filtered_as_empty() {
        let outcome = aggregate_sample(&ratings(0, 0, 2), 2).unwrap();
        assert_eq!(
            outcome,
            AggregateOutcome::Filtered {
                reason: FilterReason::AllSkipped,
                skips: 2
            }
        );
    }

    #[test]
    fn empty_ratings_is_an_error() {
        assert!(matches!(
            aggregate_sample(&[], 2),
            Err(RatingsError::EmptyRatings)
        ));
    }

    #[test]
    fn below_protocol_count_is_flagged_but_scored() {
        let s = score_of(aggregate_sample(&ratings(3, 2, 0), 2).unwrap());
        assert!(s.below_protocol_count());
        assert_eq!(s.n_valid(), Some(5));
    }

    /// For n in {8, 9, 10}, 8k/n is never exactly half-integral, and the
    /// integer rounding matches an f64 oracle on every (n, k).
    #[test]
    fn protocol_rounding_never_hits_a_half_case() {
        for n in 8usize..=10 {
            for k in 0..=n {
                // Half-integral iff 16k ≡ n (mod 2n).
                assert_ne!((16 * k) % (2 * n), n, "half case at n={n} k={k}");
                let via_ints = (16 * k + n) / (2 * n);
                let via_f64 = (8.0 * k as f64 / n as f64).round() as usize;
                assert_eq!(via_ints, via_f64, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn quantization_is_bitwise_exact() {
        for n in 1usize..=MAX_RATINGS_PER_RECORD {
            for k in 0..=n {
                let s = score_of(aggregate_sample(&ratings(k, n - k, 0), 2).unwrap());
                let scaled = s.value() * 8.0;
                assert_eq!(scaled, scaled.trunc());
            }
        }
    }

    #[test]
    fn dataset_aggregation_splits_scores_and_filter_log() {
        let records = vec![
            RatingRecord {
                image_id: "i1".into(),
                caption_id: "c1".into(),
                caption: None,
                ratings: ratings(10, 0, 0),
            },
            RatingRecord {
                image_id: "i1".into(),
                caption_id: "c2".into(),
                caption: None,
                ratings: ratings(3, 4, 3),
            },
            RatingRecord {
                image_id: "i2".into(),
                caption_id: "c1".into(),
                caption: Some("a cat".into()),
                ratings: ratings(2, 8, 0),
            },
        ];
        let summary = aggregate_dataset(records, 2).unwrap();
        assert_eq!(summary.scores.len(), 2);
        assert_eq!(summary.filtered.len(), 1);
        assert_eq!(summary.filtered[0].caption_id, "c2");
        assert_eq!(summary.filtered[0].skips, 3);
        // Input order preserved.
        assert_eq!(summary.scores[0].caption_id, "c1");
        assert_eq!(summary.scores[1].image_id, "i2");
    }

    #[test]
    fn empty_dataset_aggregates_to_nothing() {
        let summary = aggregate_dataset(Vec::new(), 2).unwrap();
        assert!(summary.scores.is_empty());
        assert!(summary.filtered.is_empty());
    }

    #[test]
    fn duplicate_key_is_rejected_by_name() {
        let rec = |caption_id: &str| RatingRecord {
            image_id: "img".into(),
            caption_id: caption_id.into(),
            caption: None,
            ratings: ratings(5, 5, 0),
        };
        let err = aggregate_dataset(vec![rec("c"), rec("c")], 2).unwrap_err();
        match err {
            RatingsError::DuplicateKey {
                image_id,
                caption_id,
            } => {
                assert_eq!(image_id, "img");
                assert_eq!(caption_id, "c");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn stability_of_identical_maps_is_degenerate() {
        let mut a = BTreeMap::new();
        a.insert("k1", QualityScore::from_eighths(8, Some(10)).unwrap());
        a.insert("k2", QualityScore::from_eighths(3, Some(10)).unwrap());
        let report = stability_report(&a, &a).unwrap();
        assert_eq!(report.n_pairs, 2);
        assert_eq!(report.mean_diff, 0.0);
        assert_eq!(report.std_diff, 0.0);
        assert_eq!(report.frac_within_quarter, 1.0);
    }

    #[test]
    fn stability_single_pair() {
        let mut a = BTreeMap::new();
        a.insert("k", QualityScore::from_eighths(8, None).unwrap());
        let mut b = BTreeMap::new();
        b.insert("k", QualityScore::from_eighths(4, None).unwrap());
        let report = stability_report(&a, &b).unwrap();
        assert_eq!(report.mean_diff, 0.5);
        assert_eq!(report.std_diff, 0.0);
        assert_eq!(report.frac_within_quarter, 0.0);
    }

    #[test]
    fn stability_requires_overlap() {
        let mut a = BTreeMap::new();
        a.insert("x", QualityScore::from_eighths(1, None).unwrap());
        let mut b = BTreeMap::new();
        b.insert("y", QualityScore::from_eighths(1, None).unwrap());
        assert!(matches!(
            stability_report(&a, &b),
            Err(RatingsError::NoOverlap)
        ));
    }

    #[test]
    fn simulated_raters_degenerate_cases() {
        let all_yes = simulate_rater_process(1.0, 10, 0.0, 7).unwrap();
        assert!(all_yes.iter().all(|r| *r == Rating::Yes));
        let all_no = simulate_rater_process(0.0, 10, 0.0, 7).unwrap();
        assert!(all_no.iter().all(|r| *r == Rating::No));
    }

    #[test]
    fn simulated_raters_hit_the_target_rate() {
        let sampled = simulate_rater_process(0.5, 10_000, 0.0, 42).unwrap();
        let yes_rate =
            sampled.iter().filter(|r| **r == Rating::Yes).count() as f64 / sampled.len() as f64;
        assert!((yes_rate - 0.5).abs() < 0.02, "yes rate {yes_rate}");
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let a = simulate_rater_process(0.3, 50, 0.1, 9).unwrap();
        let b = simulate_rater_process(0.3, 50, 0.1, 9).unwrap();
        assert_eq!(a, b);
    }

    /// 509-pair double evaluation with both sides drawn from the same
    /// process: near-zero mean and std below the theoretical bound
    /// sqrt(2 * 0.25 / 10) + 0.01.
    #[test]
    fn double_evaluation_monte_carlo_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(509);
        let mut a = BTreeMap::new();
        let mut b = BTreeMap::new();
        for pair in 0..509usize {
            let p = rng.random::<f64>();
            let first = simulate_rater_process_with(p, 10, 0.0, &mut rng).unwrap();
            let second = simulate_rater_process_with(p, 10, 0.0, &mut rng).unwrap();
            if let AggregateOutcome::Scored(s) = aggregate_sample(&first, 2).unwrap() {
                a.insert(pair, s);
            }
            if let AggregateOutcome::Scored(s) = aggregate_sample(&second, 2).unwrap() {
                b.insert(pair, s);
            }
        }
        let report = stability_report(&a, &b).unwrap();
        assert_eq!(report.n_pairs, 509);
        assert!(report.mean_diff.abs() < 0.03, "mean {}", report.mean_diff);
        assert!(report.std_diff <= 0.2336, "std {}", report.std_diff);
    }

    #[test]
    fn ratings_and_scores_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let ratings_path = dir.path().join("ratings.jsonl");
        let records = vec![
            RatingRecord {
                image_id: "img-1".into(),
                caption_id: "cap-1".into(),
                caption: Some("a boat on a lake".into()),
                ratings: ratings(7, 2, 1),
            },
            RatingRecord {
                image_id: "img-2".into(),
                caption_id: "cap-1".into(),
                caption: None,
                ratings: ratings(1, 9, 0),
            },
        ];
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        std::fs::write(&ratings_path, text).unwrap();

        let loaded = read_ratings_jsonl(&ratings_path).unwrap();
        assert_eq!(loaded, records);

        let summary = aggregate_dataset(loaded, 2).unwrap();
        let scores_path = dir.path().join("scores.jsonl");
        write_scores_jsonl(&scores_path, &summary.scores, false).unwrap();
        let reread = read_scores_jsonl(&scores_path).unwrap();
        assert_eq!(reread, summary.scores);

        // Overwrite protection.
        assert!(matches!(
            write_scores_jsonl(&scores_path, &summary.scores, false),
            Err(RatingsError::Io(_))
        ));
        write_scores_jsonl(&scores_path, &summary.scores, true).unwrap();
    }

    #[test]
    fn parse_error_carries_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"image_id\":\"i\",\"caption_id\":\"c\",\"ratings\":[\"YES\"]}\nnot json\n",
        )
        .unwrap();
        match read_ratings_jsonl(&path) {
            Err(RatingsError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        /// Aggregation is invariant under permutation of the ratings list.
        #[test]
        fn aggregation_ignores_rating_order(
            mut ratings in proptest::collection::vec(
                prop_oneof![Just(Rating::Yes), Just(Rating::No), Just(Rating::Skip)],
                1..=MAX_RATINGS_PER_RECORD,
            ),
            seed in any::<u64>(),
        ) {
            let before = aggregate_sample(&ratings, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            ratings.shuffle(&mut rng);
            let after = aggregate_sample(&ratings, 2).unwrap();
            prop_assert_eq!(before, after);
        }

        /// Every produced score is exactly k/8.
        #[test]
        fn scores_are_exact_eighths(
            ratings in proptest::collection::vec(
                prop_oneof![Just(Rating::Yes), Just(Rating::No), Just(Rating::Skip)],
                1..=MAX_RATINGS_PER_RECORD,
            ),
        ) {
            if let AggregateOutcome::Scored(s) = aggregate_sample(&ratings, 2).unwrap() {
                let scaled = s.value() * 8.0;
                prop_assert_eq!(scaled, scaled.trunc());
                prop_assert!(s.eighths() <= 8);
            }
        }
    }
}
