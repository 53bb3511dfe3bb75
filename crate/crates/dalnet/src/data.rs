//! Load-series ingestion and preparation: parse hourly records from
//! delimiter-separated text, normalize with training-range min-max, window
//! into (previous day, target day) pairs, and split chronologically.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use thiserror::Error;

use crate::diffusion::TrainSample;

pub const HOURS_PER_DAY: usize = 24;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read '{path}': {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("line {line}: cannot parse {what} '{value}'")]
    BadField { line: u64, what: &'static str, value: String },
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(NaiveDateTime),
    #[error("file contains no records")]
    Empty,
    #[error("records are not hourly: {prev} -> {next}")]
    NonHourlySpacing { prev: NaiveDateTime, next: NaiveDateTime },
    #[error("constant series (max == min == {0}); cannot normalize")]
    ConstantSeries(f64),
    #[error("normalizer range is empty")]
    EmptyRange,
    #[error("need at least {need} complete consecutive days, found {found}")]
    TooFewDays { need: usize, found: usize },
    #[error("need at least {need} samples to split, found {found}")]
    TooFewSamples { need: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One hourly reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadRecord {
    pub timestamp: NaiveDateTime,
    pub load: f64,
}

/// How to read the input file.
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub timestamp_column: String,
    pub load_column: String,
    pub delimiter: u8,
    /// chrono format strings tried in order.
    pub timestamp_formats: Vec<String>,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            timestamp_column: "timestamp".into(),
            load_column: "load".into(),
            delimiter: b',',
            timestamp_formats: vec![
                "%Y-%m-%dT%H:%M:%S".into(),
                "%Y-%m-%d %H:%M:%S".into(),
                "%Y-%m-%d %H:%M".into(),
            ],
        }
    }
}

/// What ingestion had to tolerate.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// Rows that arrived before an earlier timestamp (sorted afterwards).
    pub out_of_order: usize,
    /// Jumps of more than one hour between consecutive sorted records.
    pub gaps: Vec<(NaiveDateTime, NaiveDateTime)>,
}

fn parse_timestamp(value: &str, formats: &[String], line: u64) -> Result<NaiveDateTime> {
    for f in formats {
        if let Ok(ts) = NaiveDateTime::parse_from_str(value, f) {
            return Ok(ts);
        }
    }
    Err(DataError::BadField { line, what: "timestamp", value: value.to_string() })
}

/// Parse and chronologically sort hourly records. Duplicate timestamps are an
/// error; out-of-order rows are sorted and counted; gaps are reported.
pub fn ingest_csv(path: &Path, spec: &ColumnSpec) -> Result<(Vec<LoadRecord>, IngestReport)> {
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let ts_idx = col(&spec.timestamp_column)?;
    let load_idx = col(&spec.load_column)?;

    let mut records = Vec::new();
    let mut report = IngestReport::default();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let ts_raw = row.get(ts_idx).unwrap_or("");
        let load_raw = row.get(load_idx).unwrap_or("");
        let timestamp = parse_timestamp(ts_raw, &spec.timestamp_formats, line)?;
        let load: f64 = load_raw.parse().map_err(|_| DataError::BadField {
            line,
            what: "load",
            value: load_raw.to_string(),
        })?;
        if !load.is_finite() {
            return Err(DataError::BadField { line, what: "load", value: load_raw.to_string() });
        }
        if let Some(last) = records.last() {
            let last: &LoadRecord = last;
            if timestamp < last.timestamp {
                report.out_of_order += 1;
            }
        }
        records.push(LoadRecord { timestamp, load });
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }

    records.sort_by_key(|r| r.timestamp);
    for pair in records.windows(2) {
        let delta = pair[1].timestamp - pair[0].timestamp;
        if delta == chrono::Duration::zero() {
            return Err(DataError::DuplicateTimestamp(pair[1].timestamp));
        }
        if delta < chrono::Duration::hours(1) {
            return Err(DataError::NonHourlySpacing {
                prev: pair[0].timestamp,
                next: pair[1].timestamp,
            });
        }
        if delta > chrono::Duration::hours(1) {
            report.gaps.push((pair[0].timestamp, pair[1].timestamp));
        }
    }
    Ok((records, report))
}

// ── Normalization ────────────────────────────────────────────────────

/// Min-max scaling to [0, 1], fitted on the training range only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub min: f64,
    pub max: f64,
}

impl Normalizer {
    /// Fit from records with dates up to and including `end_date`.
    pub fn fit(records: &[LoadRecord], end_date: NaiveDate) -> Result<Self> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for r in records.iter().filter(|r| r.timestamp.date() <= end_date) {
            min = min.min(r.load);
            max = max.max(r.load);
        }
        if !min.is_finite() {
            return Err(DataError::EmptyRange);
        }
        if max == min {
            return Err(DataError::ConstantSeries(min));
        }
        Ok(Normalizer { min, max })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

// ── Day pairs ────────────────────────────────────────────────────────

/// One training/evaluation unit: the previous day's normalized curve as the
/// condition and the target day's normalized curve.
#[derive(Debug, Clone, PartialEq)]
pub struct DaySample {
    pub condition: Vec<f64>,
    pub target: Vec<f64>,
    /// Date of the target day.
    pub date: NaiveDate,
}

impl DaySample {
    pub fn train_sample(&self) -> TrainSample {
        TrainSample { condition: self.condition.clone(), target: self.target.clone() }
    }
}

/// Days dropped for missing hours.
#[derive(Debug, Clone, Default)]
pub struct DayReport {
    pub incomplete_days: Vec<NaiveDate>,
}

/// Group records into complete calendar days (all 24 hours present), raw MW.
fn complete_days(records: &[LoadRecord]) -> (BTreeMap<NaiveDate, [f64; HOURS_PER_DAY]>, DayReport) {
    let mut by_day: BTreeMap<NaiveDate, Vec<(u32, f64)>> = BTreeMap::new();
    for r in records {
        by_day
            .entry(r.timestamp.date())
            .or_default()
            .push((r.timestamp.hour(), r.load));
    }
    let mut days = BTreeMap::new();
    let mut report = DayReport::default();
    for (date, mut hours) in by_day {
        hours.sort_by_key(|&(h, _)| h);
        let complete = hours.len() == HOURS_PER_DAY
            && hours.iter().enumerate().all(|(i, &(h, _))| h as usize == i);
        if complete {
            let mut curve = [0.0; HOURS_PER_DAY];
            for (i, &(_, v)) in hours.iter().enumerate() {
                curve[i] = v;
            }
            days.insert(date, curve);
        } else {
            report.incomplete_days.push(date);
        }
    }
    (days, report)
}

/// One sample per pair of consecutive complete days, normalized.
pub fn make_day_pairs(
    records: &[LoadRecord],
    normalizer: &Normalizer,
) -> Result<(Vec<DaySample>, DayReport)> {
    let (days, report) = complete_days(records);
    if days.len() < 2 {
        return Err(DataError::TooFewDays { need: 2, found: days.len() });
    }
    let mut samples = Vec::new();
    let entries: Vec<(&NaiveDate, &[f64; HOURS_PER_DAY])> = days.iter().collect();
    for pair in entries.windows(2) {
        let (prev_date, prev) = pair[0];
        let (date, curve) = pair[1];
        if prev_date.succ_opt() != Some(*date) {
            continue;
        }
        samples.push(DaySample {
            condition: prev.iter().map(|&v| normalizer.normalize(v)).collect(),
            target: curve.iter().map(|&v| normalizer.normalize(v)).collect(),
            date: *date,
        });
    }
    if samples.is_empty() {
        return Err(DataError::TooFewDays { need: 2, found: 1 });
    }
    Ok((samples, report))
}

/// Chronological 80/20 split: first floor(0.8·n) samples train, rest test.
pub fn train_test_split(samples: &[DaySample]) -> Result<(Vec<DaySample>, Vec<DaySample>)> {
    if samples.len() < 5 {
        return Err(DataError::TooFewSamples { need: 5, found: samples.len() });
    }
    let cut = samples.len() * 8 / 10;
    Ok((samples[..cut].to_vec(), samples[cut..].to_vec()))
}

/// Everything the pipeline produces from a raw record stream.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<DaySample>,
    pub test: Vec<DaySample>,
    pub normalizer: Normalizer,
    pub day_report: DayReport,
}

/// Leakage-safe preparation: day pairing and the split boundary are computed
/// on raw days first, the normalizer is fitted only on records up to the last
/// training target date, and only then are the samples normalized.
pub fn prepare_dataset(records: &[LoadRecord]) -> Result<Dataset> {
    let (days, _) = complete_days(records);
    let dates: Vec<NaiveDate> = days.keys().copied().collect();
    let mut pair_targets = Vec::new();
    for pair in dates.windows(2) {
        if pair[0].succ_opt() == Some(pair[1]) {
            pair_targets.push(pair[1]);
        }
    }
    if pair_targets.len() < 5 {
        return Err(DataError::TooFewSamples { need: 5, found: pair_targets.len() });
    }
    let cut = pair_targets.len() * 8 / 10;
    let train_end = pair_targets[cut - 1];

    let normalizer = Normalizer::fit(records, train_end)?;
    let (samples, day_report) = make_day_pairs(records, &normalizer)?;
    let (train, test) = train_test_split(&samples)?;
    debug_assert_eq!(train.last().map(|s| s.date), Some(train_end));
    Ok(Dataset { train, test, normalizer, day_report })
}

/// Slice keeping only the last `days` calendar days of records.
pub fn keep_last_days(records: Vec<LoadRecord>, days: i64) -> Vec<LoadRecord> {
    let Some(last) = records.last() else { return records };
    let cutoff = last.timestamp.date() - chrono::Duration::days(days - 1);
    records.into_iter().filter(|r| r.timestamp.date() >= cutoff).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "timestamp,load").unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    fn hourly_lines(start_day: u32, days: usize, base: f64) -> Vec<String> {
        let mut out = Vec::new();
        for d in 0..days {
            for h in 0..24 {
                out.push(format!(
                    "2021-03-{:02}T{:02}:00:00,{}",
                    start_day + d as u32,
                    h,
                    base + d as f64 * 10.0 + h as f64
                ));
            }
        }
        out
    }

    #[test]
    fn ingest_two_rows() {
        let f = write_csv(&["2021-01-01T00:00:00,100.5", "2021-01-01T01:00:00,101.5"]);
        let (records, report) = ingest_csv(f.path(), &ColumnSpec::default()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].load, 100.5);
        assert!(records[0].timestamp < records[1].timestamp);
        assert_eq!(report.out_of_order, 0);
        assert!(report.gaps.is_empty());
    }

    #[test]
    fn ingest_rejects_bad_load_with_line() {
        let f = write_csv(&["2021-01-01T00:00:00,100.5", "2021-01-01T01:00:00,oops"]);
        let err = ingest_csv(f.path(), &ColumnSpec::default()).unwrap_err();
        match err {
            DataError::BadField { line, what, value } => {
                assert_eq!(line, 3);
                assert_eq!(what, "load");
                assert_eq!(value, "oops");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ingest_sorts_and_counts_out_of_order() {
        let f = write_csv(&[
            "2021-01-01T02:00:00,3",
            "2021-01-01T00:00:00,1",
            "2021-01-01T01:00:00,2",
        ]);
        let (records, report) = ingest_csv(f.path(), &ColumnSpec::default()).unwrap();
        let loads: Vec<f64> = records.iter().map(|r| r.load).collect();
        assert_eq!(loads, vec![1.0, 2.0, 3.0]);
        assert!(report.out_of_order > 0);
    }

    #[test]
    fn ingest_rejects_duplicates_and_empty() {
        let f = write_csv(&["2021-01-01T00:00:00,1", "2021-01-01T00:00:00,2"]);
        assert!(matches!(
            ingest_csv(f.path(), &ColumnSpec::default()),
            Err(DataError::DuplicateTimestamp(_))
        ));

        let f = write_csv(&[]);
        assert!(matches!(ingest_csv(f.path(), &ColumnSpec::default()), Err(DataError::Empty)));
    }

    #[test]
    fn ingest_reports_gaps() {
        let f = write_csv(&["2021-01-01T00:00:00,1", "2021-01-01T03:00:00,2"]);
        let (_, report) = ingest_csv(f.path(), &ColumnSpec::default()).unwrap();
        assert_eq!(report.gaps.len(), 1);
    }

    #[test]
    fn ingest_missing_column() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "when,mw").unwrap();
        writeln!(f, "2021-01-01T00:00:00,1").unwrap();
        f.flush().unwrap();
        assert!(matches!(
            ingest_csv(f.path(), &ColumnSpec::default()),
            Err(DataError::MissingColumn(c)) if c == "timestamp"
        ));
    }

    #[test]
    fn ingest_alternate_format_and_delimiter() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "timestamp;load").unwrap();
        writeln!(f, "2021-01-01 00:00;5.5").unwrap();
        f.flush().unwrap();
        let spec = ColumnSpec { delimiter: b';', ..ColumnSpec::default() };
        let (records, _) = ingest_csv(f.path(), &spec).unwrap();
        assert_eq!(records[0].load, 5.5);
    }

    fn rec(day: u32, hour: u32, load: f64) -> LoadRecord {
        LoadRecord {
            timestamp: NaiveDate::from_ymd_opt(2021, 1, day)
                .unwrap()
                .and_hms_opt(hour, 0, 0)
                .unwrap(),
            load,
        }
    }

    #[test]
    fn normalizer_hand_case_and_roundtrip() {
        let records = vec![rec(1, 0, 10.0), rec(1, 1, 20.0), rec(1, 2, 30.0)];
        let norm = Normalizer::fit(&records, NaiveDate::from_ymd_opt(2021, 1, 1).unwrap()).unwrap();
        assert_eq!(norm.min, 10.0);
        assert_eq!(norm.max, 30.0);
        assert_eq!(norm.normalize(10.0), 0.0);
        assert_eq!(norm.normalize(20.0), 0.5);
        assert_eq!(norm.normalize(30.0), 1.0);
        for x in [11.3, 17.77, 29.999] {
            assert!((norm.denormalize(norm.normalize(x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_rejects_constant_series() {
        let records = vec![rec(1, 0, 5.0), rec(1, 1, 5.0)];
        assert!(matches!(
            Normalizer::fit(&records, NaiveDate::from_ymd_opt(2021, 1, 1).unwrap()),
            Err(DataError::ConstantSeries(_))
        ));
    }

    #[test]
    fn normalizer_ignores_later_records() {
        let mut records = vec![rec(1, 0, 10.0), rec(1, 1, 20.0)];
        let cut = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        let base = Normalizer::fit(&records, cut).unwrap();
        records.push(rec(2, 0, 1000.0));
        records.push(rec(2, 1, -50.0));
        let with_later = Normalizer::fit(&records, cut).unwrap();
        assert_eq!(base, with_later);
    }

    fn full_days(n_days: usize) -> Vec<LoadRecord> {
        let mut records = Vec::new();
        for d in 0..n_days {
            for h in 0..24 {
                records.push(rec(1 + d as u32, h, 100.0 + d as f64 + (h as f64) * 0.5));
            }
        }
        records
    }

    #[test]
    fn three_days_make_two_pairs() {
        let records = full_days(3);
        let norm = Normalizer::fit(&records, NaiveDate::from_ymd_opt(2021, 1, 3).unwrap()).unwrap();
        let (samples, report) = make_day_pairs(&records, &norm).unwrap();
        assert_eq!(samples.len(), 2);
        assert!(report.incomplete_days.is_empty());
        // consecutive samples chain: condition of the second is the first's target
        assert_eq!(samples[1].condition, samples[0].target);
        assert!(samples.iter().all(|s| s.condition.len() == 24 && s.target.len() == 24));
        let all_unit = samples
            .iter()
            .flat_map(|s| s.condition.iter().chain(&s.target))
            .all(|&v| (0.0..=1.0).contains(&v));
        assert!(all_unit);
    }

    #[test]
    fn missing_hour_drops_day() {
        let mut records = full_days(2);
        // remove hour 13 of day 2
        records.retain(|r| !(r.timestamp.day() == 2 && r.timestamp.hour() == 13));
        let norm = Normalizer::fit(&records, NaiveDate::from_ymd_opt(2021, 1, 2).unwrap()).unwrap();
        let result = make_day_pairs(&records, &norm);
        match result {
            Err(DataError::TooFewDays { found, .. }) => assert_eq!(found, 1),
            other => panic!("expected TooFewDays, got {other:?}"),
        }
    }

    #[test]
    fn non_consecutive_days_do_not_pair() {
        let mut records = full_days(2);
        // add a complete day 5, separated from days 1-2
        for h in 0..24 {
            records.push(rec(5, h, 50.0 + h as f64));
        }
        let norm = Normalizer::fit(&records, NaiveDate::from_ymd_opt(2021, 1, 5).unwrap()).unwrap();
        let (samples, _) = make_day_pairs(&records, &norm).unwrap();
        assert_eq!(samples.len(), 1);
    }

    #[test]
    fn split_sizes_and_order() {
        let records = full_days(11); // 10 pairs
        let norm = Normalizer::fit(&records, NaiveDate::from_ymd_opt(2021, 1, 11).unwrap()).unwrap();
        let (samples, _) = make_day_pairs(&records, &norm).unwrap();
        assert_eq!(samples.len(), 10);
        let (train, test) = train_test_split(&samples).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        assert!(train.iter().all(|s| s.date < test[0].date));

        let five = &samples[..5];
        let (train, test) = train_test_split(five).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 1);

        assert!(matches!(
            train_test_split(&samples[..4]),
            Err(DataError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn prepare_dataset_is_leakage_free() {
        let lines = hourly_lines(1, 10, 100.0);
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let f = write_csv(&refs);
        let (records, _) = ingest_csv(f.path(), &ColumnSpec::default()).unwrap();
        let base = prepare_dataset(&records).unwrap();

        // Perturb only records after the training range; the normalizer and
        // training samples must not move.
        let train_end = base.train.last().unwrap().date;
        let mut perturbed = records.clone();
        for r in perturbed.iter_mut().filter(|r| r.timestamp.date() > train_end) {
            r.load *= 3.0;
        }
        let shifted = prepare_dataset(&perturbed).unwrap();
        assert_eq!(base.normalizer, shifted.normalizer);
        assert_eq!(base.train, shifted.train);
    }

    #[test]
    fn samples_roundtrip_to_original_megawatts() {
        let records = full_days(8);
        let ds = prepare_dataset(&records).unwrap();
        let by_ts: std::collections::HashMap<NaiveDateTime, f64> =
            records.iter().map(|r| (r.timestamp, r.load)).collect();
        for s in ds.train.iter().chain(&ds.test) {
            for (h, &v) in s.target.iter().enumerate() {
                let ts = s.date.and_hms_opt(h as u32, 0, 0).unwrap();
                let mw = ds.normalizer.denormalize(v);
                assert!((mw - by_ts[&ts]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn keep_last_days_cuts_prefix() {
        let records = full_days(10);
        let kept = keep_last_days(records, 3);
        assert_eq!(kept.len(), 3 * 24);
        assert_eq!(kept[0].timestamp.day(), 8);
    }
}
