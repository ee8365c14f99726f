//! Synthetic timestamp-dependent generation tasks. In both tasks the target
//! is a deterministic function of (source, timestamp) but not of the source
//! alone, so a timestamp-blind model has a computable accuracy ceiling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CorpusRecord;
use crate::temporal::{days_in_month, shift_date, CalendarDate, DateShift, MONTH_NAMES};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("sample count must be at least 1")]
    ZeroCount,
    #[error("timestamp range is empty")]
    EmptyRange,
    #[error("birth year range [{0}, {1}] allows ages outside [0, 99]")]
    AgeOutOfRange(i32, i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    /// "report period months_ago K" -> "period ends <month K months back>".
    MonthResolution,
    /// "name pN birth_year Y" -> "age <timestamp year - Y>".
    Age,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub count: usize,
    pub seed: u64,
    pub range_lo: CalendarDate,
    pub range_hi: CalendarDate,
    /// Birth-year range for the age task.
    pub birth_lo: i32,
    pub birth_hi: i32,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, count: usize, seed: u64) -> Self {
        Self {
            kind,
            count,
            seed,
            range_lo: CalendarDate::new(2000, 1, 1).unwrap(),
            range_hi: CalendarDate::new(2019, 12, 31).unwrap(),
            birth_lo: 1921,
            birth_hi: 2000,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.count == 0 {
            return Err(SynthError::ZeroCount);
        }
        if self.range_lo > self.range_hi {
            return Err(SynthError::EmptyRange);
        }
        if self.kind == SynthKind::Age {
            let max_age = self.range_hi.year() - self.birth_lo;
            let min_age = self.range_lo.year() - self.birth_hi;
            if min_age < 0 || max_age > 99 {
                return Err(SynthError::AgeOutOfRange(self.birth_lo, self.birth_hi));
            }
        }
        Ok(())
    }
}

// Years, months, and days are drawn independently (months uniform by
// construction), rejecting the rare draw outside [lo, hi].
fn random_date<R: Rng>(lo: CalendarDate, hi: CalendarDate, rng: &mut R) -> CalendarDate {
    loop {
        let year = rng.gen_range(lo.year()..=hi.year());
        let month = rng.gen_range(1u32..=12);
        let day = rng.gen_range(1u32..=days_in_month(year, month));
        let date = CalendarDate::new(year, month, day).expect("constructed in range");
        if date >= lo && date <= hi {
            return date;
        }
    }
}

pub const MONTH_TASK_MAX_LAG: u32 = 6;

/// The month a report period ends, K months before the timestamp.
pub fn month_task_target(timestamp: CalendarDate, months_ago: u32) -> &'static str {
    let shifted = shift_date(timestamp, DateShift::months(-(months_ago as i32)))
        .expect("shift stays in range");
    MONTH_NAMES[(shifted.month() - 1) as usize]
}

/// Generates the month-resolution task: the target month is recoverable only
/// with the timestamp.
pub fn gen_month_resolution(spec: &SynthSpec) -> Result<Vec<CorpusRecord>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let timestamp = random_date(spec.range_lo, spec.range_hi, &mut rng);
        let k = rng.gen_range(1..=MONTH_TASK_MAX_LAG);
        records.push(CorpusRecord {
            source: format!("report period months_ago {k}"),
            target: format!("period ends {}", month_task_target(timestamp, k)),
            timestamp,
        });
    }
    Ok(records)
}

/// Generates the age task: "age <timestamp year - birth year>".
pub fn gen_age_task(spec: &SynthSpec) -> Result<Vec<CorpusRecord>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let timestamp = random_date(spec.range_lo, spec.range_hi, &mut rng);
        let birth_year = rng.gen_range(spec.birth_lo..=spec.birth_hi);
        let age = timestamp.year() - birth_year;
        debug_assert!((0..=99).contains(&age));
        records.push(CorpusRecord {
            source: format!("name p{} birth_year {birth_year}", i % 50),
            target: format!("age {age}"),
            timestamp,
        });
    }
    Ok(records)
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<CorpusRecord>, SynthError> {
    match spec.kind {
        SynthKind::MonthResolution => gen_month_resolution(spec),
        SynthKind::Age => gen_age_task(spec),
    }
}

/// Exact Bayes-optimal exact-match accuracy of a timestamp-blind predictor,
/// enumerated from the generator's joint distribution.
///
/// For the month task the target month is uniform for every source, so the
/// bound is 1/12. For the age task the source fixes the birth year and the
/// timestamp year is uniform, so the bound is 1/(number of years).
pub fn bayes_blind_accuracy(spec: &SynthSpec) -> f64 {
    match spec.kind {
        SynthKind::MonthResolution => {
            // For each source (= lag K), tally the target-month distribution
            // over the uniform (year, month) timestamp grid.
            let years = (spec.range_lo.year()..=spec.range_hi.year()).count() as f64;
            let mut best_sum = 0.0;
            for k in 1..=MONTH_TASK_MAX_LAG {
                let mut mass = [0.0f64; 12];
                for year in spec.range_lo.year()..=spec.range_hi.year() {
                    for month in 1..=12u32 {
                        let ts = CalendarDate::new(year, month, 1).unwrap();
                        let target = shift_date(ts, DateShift::months(-(k as i32))).unwrap();
                        mass[(target.month() - 1) as usize] += 1.0 / (years * 12.0);
                    }
                }
                let best = mass.iter().cloned().fold(0.0, f64::max);
                best_sum += best / MONTH_TASK_MAX_LAG as f64;
            }
            best_sum
        }
        SynthKind::Age => {
            let years = (spec.range_lo.year()..=spec.range_hi.year()).count() as f64;
            // Given the source (birth year), the age is uniform over the
            // timestamp years; the best guess captures 1/years.
            1.0 / years
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn date(y: i32, m: u32, d: u32) -> CalendarDate {
        CalendarDate::new(y, m, d).unwrap()
    }

    #[test]
    fn month_target_matches_shift_rule() {
        assert_eq!(month_task_target(date(2017, 2, 9), 2), "December");
        assert_eq!(month_task_target(date(2017, 8, 9), 2), "June");
        assert_eq!(month_task_target(date(2017, 3, 1), 3), "December");
    }

    #[test]
    fn month_generation_is_deterministic() {
        let spec = SynthSpec::new(SynthKind::MonthResolution, 50, 3);
        assert_eq!(gen_month_resolution(&spec).unwrap(), gen_month_resolution(&spec).unwrap());
        let other = SynthSpec { seed: 4, ..spec };
        assert_ne!(gen_month_resolution(&spec).unwrap(), gen_month_resolution(&other).unwrap());
    }

    #[test]
    fn month_targets_are_consistent_with_sources() {
        let spec = SynthSpec::new(SynthKind::MonthResolution, 200, 1);
        for record in gen_month_resolution(&spec).unwrap() {
            let k: u32 = record.source.split_whitespace().last().unwrap().parse().unwrap();
            assert_eq!(
                record.target,
                format!("period ends {}", month_task_target(record.timestamp, k))
            );
        }
    }

    #[test]
    fn month_marginal_is_uniform_chi_square() {
        let spec = SynthSpec::new(SynthKind::MonthResolution, 10_000, 5);
        let records = gen_month_resolution(&spec).unwrap();
        let mut counts = [0usize; 12];
        for r in &records {
            let month = r.target.split_whitespace().last().unwrap();
            let idx = MONTH_NAMES.iter().position(|m| *m == month).unwrap();
            counts[idx] += 1;
        }
        let expected = records.len() as f64 / 12.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 11 df is 31.26.
        assert!(chi2 < 31.26, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn age_task_arithmetic() {
        let spec = SynthSpec::new(SynthKind::Age, 300, 9);
        for record in gen_age_task(&spec).unwrap() {
            let birth: i32 = record.source.split_whitespace().last().unwrap().parse().unwrap();
            let age: i32 = record.target.split_whitespace().last().unwrap().parse().unwrap();
            assert_eq!(age, record.timestamp.year() - birth);
            assert!((0..=99).contains(&age));
        }
    }

    #[test]
    fn age_zero_when_born_in_timestamp_year() {
        let spec = SynthSpec {
            range_lo: date(2000, 1, 1),
            range_hi: date(2000, 12, 31),
            birth_lo: 2000,
            birth_hi: 2000,
            ..SynthSpec::new(SynthKind::Age, 5, 0)
        };
        for record in gen_age_task(&spec).unwrap() {
            assert_eq!(record.target, "age 0");
        }
    }

    #[test]
    fn validation_errors() {
        assert_eq!(
            gen_month_resolution(&SynthSpec::new(SynthKind::MonthResolution, 0, 0)),
            Err(SynthError::ZeroCount)
        );
        let bad_age = SynthSpec { birth_lo: 1800, ..SynthSpec::new(SynthKind::Age, 5, 0) };
        assert!(matches!(gen_age_task(&bad_age), Err(SynthError::AgeOutOfRange(..))));
    }

    #[test]
    fn identical_sources_have_differing_targets() {
        let spec = SynthSpec::new(SynthKind::MonthResolution, 500, 2);
        let records = gen_month_resolution(&spec).unwrap();
        let mut by_source: HashMap<&str, std::collections::HashSet<&str>> = HashMap::new();
        for r in &records {
            by_source.entry(&r.source).or_default().insert(&r.target);
        }
        assert!(by_source.values().any(|targets| targets.len() > 1));
    }

    #[test]
    fn blind_bayes_bounds() {
        let month = SynthSpec::new(SynthKind::MonthResolution, 1, 0);
        let bound = bayes_blind_accuracy(&month);
        assert!((bound - 1.0 / 12.0).abs() < 1e-12, "bound = {bound}");
        assert!(bound <= 0.20);
        let age = SynthSpec::new(SynthKind::Age, 1, 0);
        assert!((bayes_blind_accuracy(&age) - 0.05).abs() < 1e-12);
        assert!(bayes_blind_accuracy(&age) <= 0.20);
    }
}
