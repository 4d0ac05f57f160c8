//! The metrics suite: 1°-granularity error histogram, mean/median angle
//! error, rate-below-x°, recall@k, per-tag hit rates, the
//! all/matched/matched-to-all evaluation modes, and the report artifacts
//! (JSON report + histogram CSV).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::num::NonZeroU32;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::angles::{angle_diff, SouthAlignedAngle};
use crate::error::{CvoError, Result};

/// One query's evaluation outcome: ground truth, the estimate taken against
/// the correct match, where that match ranked, and the dataset tags of the
/// query and of the top-ranked candidate. `theta_est_top1` optionally carries
/// the orientation estimated against the top-1 candidate instead (useful when
/// retrieval picked the wrong match).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub id: u64,
    pub theta_gt: SouthAlignedAngle,
    pub theta_est: SouthAlignedAngle,
    pub rank_of_true_match: NonZeroU32,
    pub tag: String,
    pub top1_tag: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta_est_top1: Option<SouthAlignedAngle>,
}

impl EvaluationRecord {
    /// The angular error of the estimate against ground truth, in [0, 180]
    /// degrees.
    pub fn error_degrees(&self) -> f64 {
        angle_diff(self.theta_gt, self.theta_est).degrees()
    }

    /// Whether retrieval ranked the true match first.
    pub fn is_matched(&self) -> bool {
        self.rank_of_true_match.get() == 1
    }
}

/// Error counts at 1° granularity: bin `i` (1-based) covers errors in
/// [i−1, i) degrees, except bin 180 which also absorbs the exact-180° point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorHistogram {
    counts: [u64; 180],
}

impl ErrorHistogram {
    /// All 180 counts; index 0 is bin 1.
    pub fn counts(&self) -> &[u64; 180] {
        &self.counts
    }

    /// The count of bin `i` for `i` in 1..=180.
    pub fn bin(&self, i: usize) -> u64 {
        assert!((1..=180).contains(&i), "bin index {i} outside 1..=180");
        self.counts[i - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Bins every record's angular error. Errors of exactly 180° fall into bin
/// 180 so that counts always sum to the record count.
pub fn error_histogram(records: &[EvaluationRecord]) -> ErrorHistogram {
    let mut counts = [0u64; 180];
    for record in records {
        let bin = (record.error_degrees().floor() as usize + 1).min(180);
        counts[bin - 1] += 1;
    }
    ErrorHistogram { counts }
}

/// Arithmetic mean of the raw angular errors (no histogram quantization).
pub fn mean_angle_error(records: &[EvaluationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CvoError::EmptyRecords);
    }
    let sum: f64 = records.iter().map(EvaluationRecord::error_degrees).sum();
    Ok(sum / records.len() as f64)
}

/// Median of the raw angular errors, for comparison with methods that report
/// medians. Not part of the headline metrics.
pub fn median_angle_error(records: &[EvaluationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CvoError::EmptyRecords);
    }
    let mut errors: Vec<f64> = records.iter().map(EvaluationRecord::error_degrees).collect();
    errors.sort_by(f64::total_cmp);
    let mid = errors.len() / 2;
    Ok(if errors.len() % 2 == 1 {
        errors[mid]
    } else {
        0.5 * (errors[mid - 1] + errors[mid])
    })
}

/// Fraction of mass in bins 1..=x: the rate of errors below x degrees.
pub fn rate_below(hist: &ErrorHistogram, x: u32) -> Result<f64> {
    if !(1..=180).contains(&x) {
        return Err(CvoError::InvalidConfig(format!(
            "rate_below threshold must be in 1..=180, got {x}"
        )));
    }
    let total = hist.total();
    if total == 0 {
        return Err(CvoError::EmptyRecords);
    }
    let below: u64 = hist.counts[..x as usize].iter().sum();
    Ok(below as f64 / total as f64)
}

/// Fraction of records whose true match ranked within the top k.
pub fn recall_at_k(records: &[EvaluationRecord], k: u32) -> Result<f64> {
    if k == 0 {
        return Err(CvoError::InvalidConfig(
            "recall threshold k must be at least 1".into(),
        ));
    }
    if records.is_empty() {
        return Err(CvoError::EmptyRecords);
    }
    let hits = records
        .iter()
        .filter(|r| r.rank_of_true_match.get() <= k)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Per-tag hit rates: for each query tag, the fraction of its queries whose
/// top-1 candidate carries the same tag. A top-1 tag that never appears as a
/// query tag indicates corrupted records and is rejected.
pub fn hit_rate(records: &[EvaluationRecord]) -> Result<BTreeMap<String, f64>> {
    let tags: BTreeSet<&str> = records.iter().map(|r| r.tag.as_str()).collect();
    for record in records {
        if !tags.contains(record.top1_tag.as_str()) {
            return Err(CvoError::UnknownTag(record.top1_tag.clone()));
        }
    }
    let mut totals: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for record in records {
        let entry = totals.entry(record.tag.as_str()).or_insert((0, 0));
        entry.0 += 1;
        if record.top1_tag == record.tag {
            entry.1 += 1;
        }
    }
    Ok(totals
        .into_iter()
        .map(|(tag, (queries, hits))| (tag.to_string(), hits as f64 / queries as f64))
        .collect())
}

/// Which records a metric is evaluated over: every record, only those whose
/// true match ranked first, or the matched numerator spread over the full
/// record count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    All,
    Matched,
    MatchedToAll,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::All => "all",
            EvalMode::Matched => "matched",
            EvalMode::MatchedToAll => "matched_to_all",
        })
    }
}

impl FromStr for EvalMode {
    type Err = CvoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(EvalMode::All),
            "matched" => Ok(EvalMode::Matched),
            "matched_to_all" => Ok(EvalMode::MatchedToAll),
            other => Err(CvoError::InvalidConfig(format!(
                "unknown evaluation mode {other:?} (expected all, matched, or matched_to_all)"
            ))),
        }
    }
}

/// Evaluates `metric` under the given mode. `matched` restricts to rank-1
/// records and fails when there are none; `matched_to_all` rescales the
/// matched value by the matched fraction, so rate-type metrics keep their
/// matched numerator over the full record count (zero when nothing matched).
pub fn evaluate_mode<F>(records: &[EvaluationRecord], mode: EvalMode, metric: F) -> Result<f64>
where
    F: Fn(&[EvaluationRecord]) -> Result<f64>,
{
    match mode {
        EvalMode::All => metric(records),
        EvalMode::Matched => {
            let matched: Vec<EvaluationRecord> = records
                .iter()
                .filter(|r| r.is_matched())
                .cloned()
                .collect();
            if matched.is_empty() {
                return Err(CvoError::NoMatchedRecords);
            }
            metric(&matched)
        }
        EvalMode::MatchedToAll => {
            let matched: Vec<EvaluationRecord> = records
                .iter()
                .filter(|r| r.is_matched())
                .cloned()
                .collect();
            if matched.is_empty() {
                return Ok(0.0);
            }
            let fraction = matched.len() as f64 / records.len() as f64;
            Ok(metric(&matched)? * fraction)
        }
    }
}

/// Headline metrics over every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub record_count: usize,
    pub mean_angle_error: f64,
    pub median_angle_error: f64,
    pub recall_at_1: f64,
    pub rate_below_2: f64,
    pub rate_below_5: f64,
}

/// Per-mode metric values; `None` marks a value the mode cannot produce
/// (e.g. matched-only metrics when nothing matched).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub record_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_angle_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rate_below_2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rate_below_5: Option<f64>,
}

/// The evaluation report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub metrics: ReportMetrics,
    pub modes: BTreeMap<String, ModeMetrics>,
    pub hit_rates: BTreeMap<String, f64>,
}

/// Assembles the full report over a non-empty record set.
pub fn build_report(
    records: &[EvaluationRecord],
    config: serde_json::Value,
    seed: u64,
) -> Result<Report> {
    if records.is_empty() {
        return Err(CvoError::EmptyRecords);
    }
    let hist = error_histogram(records);
    let metrics = ReportMetrics {
        record_count: records.len(),
        mean_angle_error: mean_angle_error(records)?,
        median_angle_error: median_angle_error(records)?,
        recall_at_1: recall_at_k(records, 1)?,
        rate_below_2: rate_below(&hist, 2)?,
        rate_below_5: rate_below(&hist, 5)?,
    };

    let rate_metric = |x: u32| {
        move |subset: &[EvaluationRecord]| -> Result<f64> {
            rate_below(&error_histogram(subset), x)
        }
    };
    let mut modes = BTreeMap::new();
    let matched_count = records.iter().filter(|r| r.is_matched()).count();
    for mode in [EvalMode::All, EvalMode::Matched, EvalMode::MatchedToAll] {
        let count = match mode {
            EvalMode::All => records.len(),
            _ => matched_count,
        };
        let value = |metric: &dyn Fn(&[EvaluationRecord]) -> Result<f64>| {
            evaluate_mode(records, mode, metric).ok()
        };
        modes.insert(
            mode.to_string(),
            ModeMetrics {
                record_count: count,
                mean_angle_error: value(&mean_angle_error),
                rate_below_2: value(&rate_metric(2)),
                rate_below_5: value(&rate_metric(5)),
            },
        );
    }

    Ok(Report {
        version: 1,
        seed,
        config,
        metrics,
        modes,
        hit_rates: hit_rate(records)?,
    })
}

/// The report as pretty-printed JSON with a trailing newline; byte-stable for
/// fixed inputs.
pub fn report_json(report: &Report) -> String {
    let mut json = serde_json::to_string_pretty(report).expect("report serialization is infallible");
    json.push('\n');
    json
}

/// The histogram as CSV: a header plus one row per bin, upper edge first.
pub fn histogram_csv(hist: &ErrorHistogram) -> String {
    let mut csv = String::from("bin_upper_degree,count\n");
    for (idx, count) in hist.counts.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", idx + 1, count));
    }
    csv
}

/// Builds the report and writes both artifacts: the JSON document to
/// `report_path` and the histogram CSV to `histogram_path`.
pub fn emit_report(
    records: &[EvaluationRecord],
    config: serde_json::Value,
    seed: u64,
    report_path: &Path,
    histogram_path: &Path,
) -> Result<Report> {
    let report = build_report(records, config, seed)?;
    std::fs::write(report_path, report_json(&report))
        .map_err(|e| CvoError::at_path(report_path, e))?;
    let hist = error_histogram(records);
    std::fs::write(histogram_path, histogram_csv(&hist))
        .map_err(|e| CvoError::at_path(histogram_path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(
        id: u64,
        gt: f64,
        est: f64,
        rank: u32,
        tag: &str,
        top1_tag: &str,
    ) -> EvaluationRecord {
        EvaluationRecord {
            id,
            theta_gt: SouthAlignedAngle::new(gt),
            theta_est: SouthAlignedAngle::new(est),
            rank_of_true_match: NonZeroU32::new(rank).unwrap(),
            tag: tag.to_string(),
            top1_tag: top1_tag.to_string(),
            theta_est_top1: None,
        }
    }

    /// Records with the given angular errors, all matched, one tag.
    fn records_with_errors(errors: &[f64]) -> Vec<EvaluationRecord> {
        errors
            .iter()
            .enumerate()
            .map(|(i, &err)| record(i as u64, 0.0, err, 1, "synth", "synth"))
            .collect()
    }

    fn random_records(n: usize, seed: u64) -> Vec<EvaluationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let tag = if rng.random_range(0..2) == 0 { "a" } else { "b" };
                let top1 = if rng.random_range(0..2) == 0 { "a" } else { "b" };
                record(
                    i as u64,
                    rng.random_range(0.0..360.0),
                    rng.random_range(0.0..360.0),
                    rng.random_range(1..20),
                    tag,
                    top1,
                )
            })
            .collect()
    }

    #[test]
    fn histogram_bins_errors_at_one_degree() {
        let hist = error_histogram(&records_with_errors(&[0.5, 1.5, 1.5]));
        assert_eq!(hist.bin(1), 1);
        assert_eq!(hist.bin(2), 2);
        assert_eq!(hist.total(), 3);
        for i in 3..=180 {
            assert_eq!(hist.bin(i), 0);
        }
    }

    #[test]
    fn histogram_bin_edges_are_half_open() {
        // An error of exactly 1 degree belongs to bin 2 = [1, 2).
        let hist = error_histogram(&records_with_errors(&[1.0]));
        assert_eq!(hist.bin(1), 0);
        assert_eq!(hist.bin(2), 1);
    }

    #[test]
    fn histogram_clamps_the_opposite_direction_point() {
        let hist = error_histogram(&records_with_errors(&[180.0, 179.5]));
        assert_eq!(hist.bin(180), 2);
        assert_eq!(hist.total(), 2);
    }

    #[test]
    fn empty_histogram_is_all_zero() {
        let hist = error_histogram(&[]);
        assert_eq!(hist.total(), 0);
        assert!(hist.counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn histogram_conserves_mass_at_scale() {
        let records = random_records(8884, 17);
        assert_eq!(error_histogram(&records).total(), 8884);
    }

    #[test]
    fn mean_error_is_the_raw_arithmetic_mean() {
        assert_eq!(
            mean_angle_error(&records_with_errors(&[10.0, 20.0])).unwrap(),
            15.0
        );
        assert_eq!(
            mean_angle_error(&records_with_errors(&[0.0, 0.0, 0.0])).unwrap(),
            0.0
        );
        assert_eq!(
            mean_angle_error(&records_with_errors(&[0.0, 180.0])).unwrap(),
            90.0
        );
        assert!(matches!(
            mean_angle_error(&[]),
            Err(CvoError::EmptyRecords)
        ));
    }

    #[test]
    fn mean_uses_raw_errors_not_histogram_bins() {
        // 0.25 and 0.75 land in the same bin but average to 0.5 exactly.
        let records = records_with_errors(&[0.25, 0.75]);
        assert_eq!(mean_angle_error(&records).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let errors: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..180.0)).collect();
        let records = records_with_errors(&errors);
        let expected = errors.iter().sum::<f64>() / errors.len() as f64;
        assert_abs_diff_eq!(
            mean_angle_error(&records).unwrap(),
            expected,
            epsilon = 1e-9
        );
    }

    #[test]
    fn median_splits_the_sorted_errors() {
        assert_eq!(
            median_angle_error(&records_with_errors(&[5.0, 1.0, 9.0])).unwrap(),
            5.0
        );
        assert_eq!(
            median_angle_error(&records_with_errors(&[1.0, 2.0, 3.0, 10.0])).unwrap(),
            2.5
        );
        assert!(median_angle_error(&[]).is_err());
    }

    #[test]
    fn rate_below_matches_worked_example() {
        let hist = error_histogram(&records_with_errors(&[0.5, 1.5, 3.0, 10.0]));
        assert_eq!(rate_below(&hist, 2).unwrap(), 0.5);
        assert_eq!(rate_below(&hist, 180).unwrap(), 1.0);
        assert_eq!(rate_below(&hist, 1).unwrap(), 0.25);
    }

    #[test]
    fn rate_below_is_monotone_in_the_threshold() {
        let hist = error_histogram(&random_records(500, 5));
        let mut last = 0.0;
        for x in 1..=180 {
            let rate = rate_below(&hist, x).unwrap();
            assert!(rate >= last);
            last = rate;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn rate_below_validates_threshold_and_mass() {
        let hist = error_histogram(&records_with_errors(&[1.0]));
        assert!(rate_below(&hist, 0).is_err());
        assert!(rate_below(&hist, 181).is_err());
        assert!(matches!(
            rate_below(&error_histogram(&[]), 2),
            Err(CvoError::EmptyRecords)
        ));
    }

    #[test]
    fn recall_counts_ranks_within_k() {
        let records = vec![
            record(0, 0.0, 0.0, 1, "a", "a"),
            record(1, 0.0, 0.0, 2, "a", "a"),
            record(2, 0.0, 0.0, 5, "a", "a"),
        ];
        assert_abs_diff_eq!(recall_at_k(&records, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(recall_at_k(&records, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&records, 100).unwrap(), 1.0);
        let mut last = 0.0;
        for k in 1..=6 {
            let r = recall_at_k(&records, k).unwrap();
            assert!(r >= last);
            last = r;
        }
        assert!(recall_at_k(&records, 0).is_err());
        assert!(recall_at_k(&[], 1).is_err());
    }

    #[test]
    fn hit_rate_counts_same_tag_top1_fractions() {
        let single = vec![
            record(0, 0.0, 0.0, 1, "a", "a"),
            record(1, 0.0, 0.0, 3, "a", "a"),
        ];
        assert_eq!(hit_rate(&single).unwrap()["a"], 1.0);

        let crossed = vec![
            record(0, 0.0, 0.0, 2, "a", "b"),
            record(1, 0.0, 0.0, 2, "b", "a"),
        ];
        let rates = hit_rate(&crossed).unwrap();
        assert_eq!(rates["a"], 0.0);
        assert_eq!(rates["b"], 0.0);

        let mixed = vec![
            record(0, 0.0, 0.0, 1, "a", "a"),
            record(1, 0.0, 0.0, 1, "a", "a"),
            record(2, 0.0, 0.0, 4, "a", "a"),
            record(3, 0.0, 0.0, 1, "b", "a"),
        ];
        let rates = hit_rate(&mixed).unwrap();
        assert_eq!(rates["a"], 1.0);
        assert_eq!(rates["b"], 0.0);
    }

    #[test]
    fn hit_rate_rejects_a_top1_tag_outside_the_query_tags() {
        let records = vec![record(0, 0.0, 0.0, 1, "a", "mystery")];
        assert!(matches!(
            hit_rate(&records),
            Err(CvoError::UnknownTag(tag)) if tag == "mystery"
        ));
    }

    #[test]
    fn evaluate_mode_matches_worked_example() {
        // 4 records, 2 matched, both matched errors below 2 degrees.
        let records = vec![
            record(0, 0.0, 0.5, 1, "a", "a"),
            record(1, 0.0, 1.5, 1, "a", "a"),
            record(2, 0.0, 30.0, 2, "a", "a"),
            record(3, 0.0, 50.0, 3, "a", "a"),
        ];
        let r2 = |subset: &[EvaluationRecord]| rate_below(&error_histogram(subset), 2);
        assert_eq!(
            evaluate_mode(&records, EvalMode::Matched, r2).unwrap(),
            1.0
        );
        assert_eq!(
            evaluate_mode(&records, EvalMode::MatchedToAll, r2).unwrap(),
            0.5
        );
        assert_eq!(evaluate_mode(&records, EvalMode::All, r2).unwrap(), 0.5);
    }

    #[test]
    fn matched_equals_all_when_everything_matched() {
        let records = random_records(50, 23)
            .into_iter()
            .map(|mut r| {
                r.rank_of_true_match = NonZeroU32::new(1).unwrap();
                r
            })
            .collect::<Vec<_>>();
        for metric in [
            mean_angle_error as fn(&[EvaluationRecord]) -> Result<f64>,
            |s: &[EvaluationRecord]| rate_below(&error_histogram(s), 2),
            |s: &[EvaluationRecord]| recall_at_k(s, 1),
        ] {
            let all = evaluate_mode(&records, EvalMode::All, metric).unwrap();
            let matched = evaluate_mode(&records, EvalMode::Matched, metric).unwrap();
            assert_eq!(all, matched);
        }
    }

    #[test]
    fn matched_mode_without_matches_is_an_error() {
        let records = vec![record(0, 0.0, 0.0, 2, "a", "a")];
        assert!(matches!(
            evaluate_mode(&records, EvalMode::Matched, mean_angle_error),
            Err(CvoError::NoMatchedRecords)
        ));
        // The rescaled variant degrades to zero instead.
        assert_eq!(
            evaluate_mode(&records, EvalMode::MatchedToAll, mean_angle_error).unwrap(),
            0.0
        );
    }

    #[test]
    fn matched_to_all_rescales_by_the_matched_fraction() {
        let records = random_records(400, 29);
        let r5 = |subset: &[EvaluationRecord]| rate_below(&error_histogram(subset), 5);
        let matched = evaluate_mode(&records, EvalMode::Matched, r5).unwrap();
        let matched_to_all = evaluate_mode(&records, EvalMode::MatchedToAll, r5).unwrap();
        let fraction = records.iter().filter(|r| r.is_matched()).count() as f64
            / records.len() as f64;
        assert_abs_diff_eq!(matched_to_all, matched * fraction, epsilon = 1e-12);
        assert!(matched_to_all <= matched + 1e-12);
    }

    #[test]
    fn eval_mode_parses_and_prints_its_names() {
        for (name, mode) in [
            ("all", EvalMode::All),
            ("matched", EvalMode::Matched),
            ("matched_to_all", EvalMode::MatchedToAll),
        ] {
            assert_eq!(name.parse::<EvalMode>().unwrap(), mode);
            assert_eq!(mode.to_string(), name);
        }
        assert!("best".parse::<EvalMode>().is_err());
    }

    #[test]
    fn report_cross_checks_against_direct_recomputation() {
        let records = random_records(300, 31);
        let report = build_report(&records, serde_json::json!({"scale": 10}), 7).unwrap();
        let hist = error_histogram(&records);
        assert_eq!(report.metrics.record_count, 300);
        assert_eq!(report.metrics.rate_below_2, rate_below(&hist, 2).unwrap());
        assert_eq!(report.metrics.rate_below_5, rate_below(&hist, 5).unwrap());
        assert_eq!(
            report.metrics.recall_at_1,
            recall_at_k(&records, 1).unwrap()
        );
        assert_eq!(
            report.metrics.mean_angle_error,
            mean_angle_error(&records).unwrap()
        );
        assert_eq!(report.version, 1);
        assert_eq!(report.seed, 7);
        let all = &report.modes["all"];
        assert_eq!(all.record_count, 300);
        assert_eq!(all.mean_angle_error, Some(report.metrics.mean_angle_error));
        let matched = &report.modes["matched"];
        let matched_count = records.iter().filter(|r| r.is_matched()).count();
        assert_eq!(matched.record_count, matched_count);
        let m2a = &report.modes["matched_to_all"];
        let expected = matched.rate_below_2.unwrap() * matched_count as f64 / 300.0;
        assert_abs_diff_eq!(m2a.rate_below_2.unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn unmatched_report_blanks_the_matched_mode() {
        let records = vec![
            record(0, 0.0, 1.0, 2, "a", "a"),
            record(1, 0.0, 2.0, 3, "a", "a"),
        ];
        let report = build_report(&records, serde_json::Value::Null, 0).unwrap();
        let matched = &report.modes["matched"];
        assert_eq!(matched.record_count, 0);
        assert_eq!(matched.mean_angle_error, None);
        assert_eq!(matched.rate_below_2, None);
        assert_eq!(report.modes["matched_to_all"].rate_below_2, Some(0.0));
    }

    #[test]
    fn emitted_artifacts_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let records = random_records(64, 41);
        let config = serde_json::json!({"method": "fi"});
        let paths = |n: u32| {
            (
                dir.path().join(format!("report{n}.json")),
                dir.path().join(format!("hist{n}.csv")),
            )
        };
        let (r1, h1) = paths(1);
        let (r2, h2) = paths(2);
        emit_report(&records, config.clone(), 5, &r1, &h1).unwrap();
        emit_report(&records, config, 5, &r2, &h2).unwrap();
        assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
        assert_eq!(std::fs::read(&h1).unwrap(), std::fs::read(&h2).unwrap());

        let csv = std::fs::read_to_string(&h1).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("bin_upper_degree,count"));
        assert_eq!(lines.count(), 180);
        let parsed: Report =
            serde_json::from_str(&std::fs::read_to_string(&r1).unwrap()).unwrap();
        let rebuilt = build_report(&records, serde_json::json!({"method": "fi"}), 5).unwrap();
        assert_eq!(parsed, rebuilt);
    }

    #[test]
    fn histogram_csv_rows_carry_the_upper_edge() {
        let hist = error_histogram(&records_with_errors(&[0.5, 179.5, 180.0]));
        let csv = histogram_csv(&hist);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_upper_degree,count");
        assert_eq!(lines[1], "1,1");
        assert_eq!(lines[180], "180,2");
        assert_eq!(lines.len(), 181);
    }

    #[test]
    fn records_round_trip_through_json() {
        let mut records = random_records(10, 47);
        records[3].theta_est_top1 = Some(SouthAlignedAngle::new(123.5));
        let json = serde_json::to_string_pretty(&records).unwrap();
        let back: Vec<EvaluationRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, records);
        // The optional top-1 estimate only appears when present.
        let one = serde_json::to_string(&records[0]).unwrap();
        assert!(!one.contains("theta_est_top1"));
        let with = serde_json::to_string(&records[3]).unwrap();
        assert!(with.contains("theta_est_top1"));
    }

    #[test]
    fn record_json_rejects_rank_zero() {
        let json = r#"{
            "id": 0,
            "theta_gt": 0.0,
            "theta_est": 0.0,
            "rank_of_true_match": 0,
            "tag": "a",
            "top1_tag": "a"
        }"#;
        assert!(serde_json::from_str::<EvaluationRecord>(json).is_err());
    }

    #[test]
    fn record_error_helpers() {
        let r = record(0, 10.0, 350.0, 1, "a", "a");
        assert_abs_diff_eq!(r.error_degrees(), 20.0, epsilon = 1e-12);
        assert!(r.is_matched());
        assert!(!record(0, 0.0, 0.0, 2, "a", "a").is_matched());
    }
}
