//! Exact Gregorian dates: parsing, formatting, calendar-aware shifting, and
//! the standard perturbation set used by the sensitivity analysis.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MONTH_NAMES: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DateError {
    #[error("malformed date string {0:?}: expected YYYY-MM-DD")]
    Malformed(String),
    #[error("year {0} out of range [1, 9999]")]
    YearOutOfRange(i64),
    #[error("month {0} out of range [1, 12]")]
    MonthOutOfRange(i64),
    #[error("day {day} out of range [1, {max}] for {year}-{month:02}")]
    DayOutOfRange { year: i32, month: u32, day: i64, max: u32 },
}

/// A valid Gregorian calendar date. Ordering is lexicographic on
/// (year, month, day).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CalendarDate {
    year: i32,
    month: u32,
    day: u32,
}

pub fn is_leap_year(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

pub fn days_in_month(year: i32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 => {
            if is_leap_year(year) {
                29
            } else {
                28
            }
        }
        _ => unreachable!("month {month} out of range"),
    }
}

impl CalendarDate {
    pub fn new(year: i32, month: u32, day: u32) -> Result<Self, DateError> {
        if !(1..=9999).contains(&year) {
            return Err(DateError::YearOutOfRange(year as i64));
        }
        if !(1..=12).contains(&month) {
            return Err(DateError::MonthOutOfRange(month as i64));
        }
        let max = days_in_month(year, month);
        if !(1..=max).contains(&day) {
            return Err(DateError::DayOutOfRange { year, month, day: day as i64, max });
        }
        Ok(Self { year, month, day })
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn month(&self) -> u32 {
        self.month
    }

    pub fn day(&self) -> u32 {
        self.day
    }

    /// Days since 0001-01-01 (which maps to 0). Proleptic Gregorian.
    pub fn to_ordinal(&self) -> i64 {
        let y = self.year as i64 - 1;
        let mut days = y * 365 + y / 4 - y / 100 + y / 400;
        for m in 1..self.month {
            days += days_in_month(self.year, m) as i64;
        }
        days + self.day as i64 - 1
    }

    pub fn from_ordinal(ordinal: i64) -> Result<Self, DateError> {
        // The year estimate is at most one off; correct by stepping.
        let mut year = (ordinal * 400 / 146_097 + 1) as i32;
        loop {
            if year < 1 || year > 9999 {
                return Err(DateError::YearOutOfRange(year as i64));
            }
            let start = CalendarDate { year, month: 1, day: 1 }.to_ordinal();
            let len = if is_leap_year(year) { 366 } else { 365 };
            if ordinal < start {
                year -= 1;
            } else if ordinal >= start + len {
                year += 1;
            } else {
                let mut rem = (ordinal - start) as u32;
                let mut month = 1;
                while rem >= days_in_month(year, month) {
                    rem -= days_in_month(year, month);
                    month += 1;
                }
                return Ok(Self { year, month, day: rem + 1 });
            }
        }
    }

    /// ISO-8601 "YYYY-MM-DD".
    pub fn iso_format(&self) -> String {
        format!("{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

impl fmt::Display for CalendarDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.iso_format())
    }
}

impl Serialize for CalendarDate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.iso_format())
    }
}

impl<'de> Deserialize<'de> for CalendarDate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_date(&s).map_err(serde::de::Error::custom)
    }
}

/// A calendar shift applied in the order years -> months -> days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DateShift {
    pub years: i32,
    pub months: i32,
    pub days: i32,
}

impl DateShift {
    pub fn years(n: i32) -> Self {
        Self { years: n, ..Default::default() }
    }

    pub fn months(n: i32) -> Self {
        Self { months: n, ..Default::default() }
    }

    pub fn days(n: i32) -> Self {
        Self { days: n, ..Default::default() }
    }

    pub fn negate(self) -> Self {
        Self { years: -self.years, months: -self.months, days: -self.days }
    }

    pub fn is_identity(self) -> bool {
        self == Self::default()
    }
}

/// Parses an ISO-8601 "YYYY-MM-DD" string into a validated date.
pub fn parse_date(text: &str) -> Result<CalendarDate, DateError> {
    let bytes = text.as_bytes();
    let shape_ok = bytes.len() == 10
        && bytes[4] == b'-'
        && bytes[7] == b'-'
        && bytes
            .iter()
            .enumerate()
            .all(|(i, b)| if i == 4 || i == 7 { true } else { b.is_ascii_digit() });
    if !shape_ok {
        return Err(DateError::Malformed(text.to_string()));
    }
    let year: i32 = text[0..4].parse().map_err(|_| DateError::Malformed(text.to_string()))?;
    let month: u32 = text[5..7].parse().map_err(|_| DateError::Malformed(text.to_string()))?;
    let day: u32 = text[8..10].parse().map_err(|_| DateError::Malformed(text.to_string()))?;
    CalendarDate::new(year, month, day)
}

/// "18 January 2015": day and year in digits, month in its textual form,
/// no zero-padding.
pub fn format_long_date(d: CalendarDate) -> String {
    format!("{} {} {}", d.day(), MONTH_NAMES[(d.month() - 1) as usize], d.year())
}

/// Applies a shift with carry on year/month arithmetic; a day that exceeds
/// the target month's length is clamped to the last day of that month.
pub fn shift_date(d: CalendarDate, s: DateShift) -> Result<CalendarDate, DateError> {
    let mut year = d.year() as i64 + s.years as i64;
    let mut month0 = d.month() as i64 - 1 + s.months as i64;
    year += month0.div_euclid(12);
    month0 = month0.rem_euclid(12);
    if !(1..=9999).contains(&year) {
        return Err(DateError::YearOutOfRange(year));
    }
    let year = year as i32;
    let month = (month0 + 1) as u32;
    let day = d.day().min(days_in_month(year, month));
    let base = CalendarDate::new(year, month, day)?;
    if s.days == 0 {
        return Ok(base);
    }
    CalendarDate::from_ordinal(base.to_ordinal() + s.days as i64)
}

/// The six shifts probed by the sensitivity analysis: one and six months
/// and one year, in both directions.
pub fn standard_perturbations() -> Vec<(&'static str, DateShift)> {
    vec![
        ("m+1", DateShift::months(1)),
        ("m-1", DateShift::months(-1)),
        ("m+6", DateShift::months(6)),
        ("m-6", DateShift::months(-6)),
        ("y+1", DateShift::years(1)),
        ("y-1", DateShift::years(-1)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(y: i32, m: u32, day: u32) -> CalendarDate {
        CalendarDate::new(y, m, day).unwrap()
    }

    #[test]
    fn parses_valid_dates() {
        assert_eq!(parse_date("2017-02-09").unwrap(), d(2017, 2, 9));
        assert_eq!(parse_date("2016-02-29").unwrap(), d(2016, 2, 29));
    }

    #[test]
    fn rejects_invalid_dates() {
        assert_eq!(
            parse_date("2015-02-29"),
            Err(DateError::DayOutOfRange { year: 2015, month: 2, day: 29, max: 28 })
        );
        assert!(matches!(parse_date("2015-13-01"), Err(DateError::MonthOutOfRange(13))));
        assert!(matches!(parse_date("2015/01/01"), Err(DateError::Malformed(_))));
        assert!(matches!(parse_date("2015-1-1"), Err(DateError::Malformed(_))));
        assert!(matches!(parse_date(""), Err(DateError::Malformed(_))));
    }

    #[test]
    fn long_format() {
        assert_eq!(format_long_date(d(2015, 1, 18)), "18 January 2015");
        assert_eq!(format_long_date(d(2017, 12, 1)), "1 December 2017");
        assert_eq!(format_long_date(d(2004, 6, 5)), "5 June 2004");
    }

    #[test]
    fn shift_matches_perturbation_anchors() {
        assert_eq!(shift_date(d(2017, 2, 9), DateShift::months(6)).unwrap(), d(2017, 8, 9));
        assert_eq!(shift_date(d(2017, 2, 9), DateShift::months(1)).unwrap(), d(2017, 3, 9));
    }

    #[test]
    fn shift_clamps_leap_day() {
        assert_eq!(shift_date(d(2016, 2, 29), DateShift::years(1)).unwrap(), d(2017, 2, 28));
        assert_eq!(shift_date(d(2017, 1, 31), DateShift::months(1)).unwrap(), d(2017, 2, 28));
    }

    #[test]
    fn shift_carries_across_year_boundaries() {
        assert_eq!(shift_date(d(2017, 2, 9), DateShift::months(-6)).unwrap(), d(2016, 8, 9));
        assert_eq!(shift_date(d(2017, 11, 9), DateShift::months(3)).unwrap(), d(2018, 2, 9));
        assert_eq!(shift_date(d(2017, 12, 31), DateShift::days(1)).unwrap(), d(2018, 1, 1));
    }

    #[test]
    fn shift_rejects_out_of_range_years() {
        assert!(shift_date(d(9999, 12, 31), DateShift::years(1)).is_err());
        assert!(shift_date(d(1, 1, 1), DateShift::years(-1)).is_err());
    }

    #[test]
    fn standard_perturbation_set() {
        let ps = standard_perturbations();
        assert_eq!(ps.len(), 6);
        let labels: Vec<_> = ps.iter().map(|(l, _)| *l).collect();
        assert_eq!(labels, ["m+1", "m-1", "m+6", "m-6", "y+1", "y-1"]);
        assert!(ps.contains(&("y-1", DateShift::years(-1))));
        assert!(ps.contains(&("m+6", DateShift::months(6))));
    }

    #[test]
    fn iso_round_trip_exhaustive_2000_to_2020() {
        for year in 2000..=2020 {
            for month in 1..=12 {
                for day in 1..=days_in_month(year, month) {
                    let date = d(year, month, day);
                    assert_eq!(parse_date(&date.iso_format()).unwrap(), date);
                }
            }
        }
    }

    #[test]
    fn ordinal_round_trip_and_contiguity() {
        let mut prev = d(1999, 12, 31).to_ordinal();
        for year in 2000..=2005 {
            for month in 1..=12 {
                for day in 1..=days_in_month(year, month) {
                    let o = d(year, month, day).to_ordinal();
                    assert_eq!(o, prev + 1);
                    assert_eq!(CalendarDate::from_ordinal(o).unwrap(), d(year, month, day));
                    prev = o;
                }
            }
        }
    }

    fn arb_date() -> impl Strategy<Value = CalendarDate> {
        (1900..2100i32, 1..=12u32).prop_flat_map(|(y, m)| {
            (1..=days_in_month(y, m)).prop_map(move |day| d(y, m, day))
        })
    }

    fn arb_shift() -> impl Strategy<Value = DateShift> {
        (-3..=3i32, -30..=30i32, -40..=40i32)
            .prop_map(|(years, months, days)| DateShift { years, months, days })
    }

    // Detects whether applying `s` to `date` hits the day clamp.
    fn clamps(date: CalendarDate, s: DateShift) -> bool {
        let mut month0 = date.month() as i64 - 1 + s.months as i64;
        let year = date.year() as i64 + s.years as i64 + month0.div_euclid(12);
        month0 = month0.rem_euclid(12);
        date.day() > days_in_month(year as i32, (month0 + 1) as u32)
    }

    proptest! {
        #[test]
        fn year_month_shift_round_trip_without_clamping(
            date in arb_date(), years in -3..=3i32, months in -30..=30i32,
        ) {
            let s = DateShift { years, months, days: 0 };
            let shifted = shift_date(date, s).unwrap();
            if !clamps(date, s) && !clamps(shifted, s.negate()) {
                prop_assert_eq!(shift_date(shifted, s.negate()).unwrap(), date);
            }
        }

        #[test]
        fn day_shift_round_trip(date in arb_date(), days in -400..=400i32) {
            let s = DateShift::days(days);
            let shifted = shift_date(date, s).unwrap();
            prop_assert_eq!(shift_date(shifted, s.negate()).unwrap(), date);
        }

        #[test]
        fn shift_is_monotone(date in arb_date(), a in arb_shift(), b in arb_shift()) {
            // b dominates a componentwise => shifted date is never earlier.
            let big = DateShift {
                years: a.years.max(b.years),
                months: a.months.max(b.months),
                days: a.days.max(b.days),
            };
            let lo = shift_date(date, a).unwrap();
            let hi = shift_date(date, big).unwrap();
            prop_assert!(hi >= lo);
        }

        #[test]
        fn long_format_shape(date in arb_date()) {
            let text = format_long_date(date);
            let fields: Vec<_> = text.split_whitespace().collect();
            prop_assert_eq!(fields.len(), 3);
            prop_assert!(MONTH_NAMES.contains(&fields[1]));
        }
    }
}
