use chrono::{Datelike, NaiveDateTime, Timelike};

use super::parse_instant;
use crate::error::{CoreError, Result};

/// `[month, day-of-month, day-of-week (Mon = 0), hour, minute, am/pm]`.
pub type Stamp = [usize; 6];

pub const STAMP_TYPES: usize = 6;

/// Table sizes per stamp type; month and day are 1-based so index 0 is unused.
pub const STAMP_CARDINALITIES: [usize; STAMP_TYPES] = [13, 32, 7, 24, 60, 2];

/// Calendar stamp of a textual instant.
pub fn stamp_features(instant: &str) -> Result<Stamp> {
    parse_instant(instant)
        .map(|t| stamp_of(&t))
        .ok_or_else(|| CoreError::InvalidInstant(instant.to_string()))
}

pub fn stamp_of(t: &NaiveDateTime) -> Stamp {
    [
        t.month() as usize,
        t.day() as usize,
        t.weekday().num_days_from_monday() as usize,
        t.hour() as usize,
        t.minute() as usize,
        usize::from(t.hour() >= 12),
    ]
}

pub fn check_stamp(s: &Stamp) -> Result<()> {
    const LOW: [usize; STAMP_TYPES] = [1, 1, 0, 0, 0, 0];
    for i in 0..STAMP_TYPES {
        if s[i] < LOW[i] || s[i] >= STAMP_CARDINALITIES[i] {
            return Err(CoreError::OutOfRange("stamp", format!("{s:?}")));
        }
    }
    Ok(())
}
