use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::dataio::local_day_minute;
use crate::error::{CoreError, Result};

/// Half-open minute interval [start, end) within one day.
type DayIntervals = Vec<(u16, u16)>;

/// Opening hours keyed by POI with category fallback; keys are dense ids.
/// A key with any listed interval is closed outside its intervals; keys with
/// no entry fall through to the next level, ending at `default_open`.
#[derive(Clone, Debug)]
pub struct OperationalHoursTable {
    poi: HashMap<usize, [DayIntervals; 7]>,
    category: HashMap<usize, [DayIntervals; 7]>,
    pub default_open: bool,
}

impl OperationalHoursTable {
    pub fn all_open() -> Self {
        OperationalHoursTable {
            poi: HashMap::new(),
            category: HashMap::new(),
            default_open: true,
        }
    }

    /// Load from CSV rows: key_type(poi|category), key, day_of_week(0-6),
    /// open_minute, close_minute. close > 1440 wraps past midnight and is
    /// normalized into two intervals.
    pub fn load(path: &Path, default_open: bool) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, default_open)
    }

    pub fn parse(text: &str, default_open: bool) -> Result<Self> {
        let mut table = OperationalHoursTable {
            poi: HashMap::new(),
            category: HashMap::new(),
            default_open,
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| CoreError::Format {
                line: lineno + 1,
                message,
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 5 {
                return Err(err(format!("expected 5 columns, got {}", cols.len())));
            }
            let key: usize = cols[1]
                .parse()
                .map_err(|_| err(format!("bad key {:?}", cols[1])))?;
            let dow: usize = cols[2]
                .parse()
                .ok()
                .filter(|d| *d < 7)
                .ok_or_else(|| err(format!("bad day_of_week {:?}", cols[2])))?;
            let open: u32 = cols[3]
                .parse()
                .map_err(|_| err(format!("bad open_minute {:?}", cols[3])))?;
            let close: u32 = cols[4]
                .parse()
                .map_err(|_| err(format!("bad close_minute {:?}", cols[4])))?;
            if open >= 1440 || close <= open || close > 2880 {
                return Err(err(format!("bad interval {open}-{close}")));
            }
            let days = match cols[0] {
                "poi" => table.poi.entry(key).or_default(),
                "category" => table.category.entry(key).or_default(),
                other => return Err(err(format!("bad key_type {other:?}"))),
            };
            if close <= 1440 {
                days[dow].push((open as u16, close as u16));
            } else {
                days[dow].push((open as u16, 1440));
                days[(dow + 1) % 7].push((0, (close - 1440) as u16));
            }
        }
        for days in table.poi.values_mut().chain(table.category.values_mut()) {
            for intervals in days.iter_mut() {
                normalize(intervals);
            }
        }
        Ok(table)
    }

    pub fn is_open(&self, poi_id: usize, category_id: usize, local_timestamp: i64) -> bool {
        let (dow, minute) = local_day_minute(local_timestamp);
        if let Some(days) = self.poi.get(&poi_id) {
            return contains(&days[dow as usize], minute);
        }
        if let Some(days) = self.category.get(&category_id) {
            return contains(&days[dow as usize], minute);
        }
        self.default_open
    }
}

fn contains(intervals: &DayIntervals, minute: u16) -> bool {
    intervals.iter().any(|&(a, b)| a <= minute && minute < b)
}

/// Sort and merge overlapping or touching intervals.
fn normalize(intervals: &mut DayIntervals) {
    intervals.sort_unstable();
    let mut merged: DayIntervals = Vec::with_capacity(intervals.len());
    for &(a, b) in intervals.iter() {
        match merged.last_mut() {
            Some((_, pb)) if a <= *pb => *pb = (*pb).max(b),
            _ => merged.push((a, b)),
        }
    }
    *intervals = merged;
}
