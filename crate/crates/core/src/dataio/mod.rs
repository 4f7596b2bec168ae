//! Check-in parsing and preprocessing: activity filter, 24-hour trajectory
//! segmentation, singleton removal, random trajectory-level split with
//! unseen-entity exclusion, season assignment, and operational-hours tables.

pub mod hours;
pub mod parse;
pub mod persist;
pub mod preprocess;

pub use hours::OperationalHoursTable;
pub use parse::{parse_checkins, ParsedLog};
pub use preprocess::{
    filter_min_activity, preprocess, segment_trajectories, split_random, DatasetSplit, Preprocessed,
};

use chrono::{DateTime, Datelike, Timelike, Utc};

/// One visit event. Ids are dense integers after remapping.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckIn {
    pub user_id: usize,
    pub poi_id: usize,
    pub category_id: usize,
    pub lat: f64,
    pub lon: f64,
    pub utc_timestamp: i64,
    pub tz_offset_minutes: i32,
}

impl CheckIn {
    /// Behavioral local time; all time-of-day semantics use this, never UTC.
    pub fn local_timestamp(&self) -> i64 {
        self.utc_timestamp + self.tz_offset_minutes as i64 * 60
    }

    /// Seconds since local midnight, normalized to [0,1).
    pub fn time_of_day_norm(&self) -> f64 {
        let secs = self.local_timestamp().rem_euclid(86_400);
        secs as f64 / 86_400.0
    }
}

/// A user's check-in sequence bounded by the 24-hour gap rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub trajectory_id: usize,
    pub user_id: usize,
    pub checkins: Vec<CheckIn>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.checkins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkins.is_empty()
    }
}

/// Per-POI attributes for the flow map and embeddings.
#[derive(Clone, Debug)]
pub struct PoiInfo {
    pub category_id: usize,
    pub lat: f64,
    pub lon: f64,
    pub checkin_count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PoiCatalog {
    pub pois: Vec<PoiInfo>,
    pub category_count: usize,
}

impl PoiCatalog {
    pub fn poi_count(&self) -> usize {
        self.pois.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeasonId {
    Winter = 0,
    Spring = 1,
    Summer = 2,
    Autumn = 3,
}

impl SeasonId {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SeasonId> {
        match i {
            0 => Some(SeasonId::Winter),
            1 => Some(SeasonId::Spring),
            2 => Some(SeasonId::Summer),
            3 => Some(SeasonId::Autumn),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hemisphere {
    North,
    South,
}

/// Meteorological season of a local timestamp: Dec-Feb winter, Mar-May
/// spring, Jun-Aug summer, Sep-Nov autumn (swapped in the south).
pub fn assign_season(local_timestamp: i64, hemisphere: Hemisphere) -> SeasonId {
    let dt = DateTime::<Utc>::from_timestamp(local_timestamp, 0)
        .unwrap_or_else(|| DateTime::<Utc>::from_timestamp(0, 0).unwrap());
    let northern = match dt.month() {
        12 | 1 | 2 => SeasonId::Winter,
        3..=5 => SeasonId::Spring,
        6..=8 => SeasonId::Summer,
        _ => SeasonId::Autumn,
    };
    match hemisphere {
        Hemisphere::North => northern,
        Hemisphere::South => match northern {
            SeasonId::Winter => SeasonId::Summer,
            SeasonId::Spring => SeasonId::Autumn,
            SeasonId::Summer => SeasonId::Winter,
            SeasonId::Autumn => SeasonId::Spring,
        },
    }
}

/// Day of week (0 = Monday) and minute of day for a local timestamp.
pub fn local_day_minute(local_timestamp: i64) -> (u8, u16) {
    let dt = DateTime::<Utc>::from_timestamp(local_timestamp, 0)
        .unwrap_or_else(|| DateTime::<Utc>::from_timestamp(0, 0).unwrap());
    let dow = dt.weekday().num_days_from_monday() as u8;
    let minute = (dt.hour() * 60 + dt.minute()) as u16;
    (dow, minute)
}
