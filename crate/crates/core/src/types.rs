//! Identifiers and calendar periods shared by every module.

use std::fmt;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(
    /// Driver identifier, unique across the whole synthetic world.
    DriverId
);
id_newtype!(TeamId);
id_newtype!(ContestId);
id_newtype!(CityId);

/// Inclusive range of calendar days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Period {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Period {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > end {
            return Err(Error::Data(format!("period start {start} after end {end}")));
        }
        Ok(Self { start, end })
    }

    /// Period of `days` days beginning at `start`.
    pub fn starting_at(start: NaiveDate, days: u32) -> Result<Self> {
        if days == 0 {
            return Err(Error::Data("period must span at least one day".into()));
        }
        Self::new(start, start + Duration::days(i64::from(days) - 1))
    }

    pub fn len_days(&self) -> usize {
        ((self.end - self.start).num_days() + 1) as usize
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> {
        let start = self.start;
        (0..self.len_days() as i64).map(move |d| start + Duration::days(d))
    }

    pub fn weekdays(&self) -> Vec<Weekday> {
        self.days().map(|d| d.weekday()).collect()
    }

    pub fn shift_days(&self, days: i64) -> Self {
        Self {
            start: self.start + Duration::days(days),
            end: self.end + Duration::days(days),
        }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..={}", self.start, self.end)
    }
}

/// Mixes a base seed with a path of integers into an independent stream seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = splitmix(base ^ 0x5eed_c0de_0000_0001);
    for &p in path {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
