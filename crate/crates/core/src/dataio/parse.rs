use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chrono::DateTime;

use crate::dataio::{CheckIn, PoiCatalog, PoiInfo};
use crate::error::{CoreError, Result};

/// Parse output: check-ins with dense ids plus the raw-id tables
/// (dense id -> raw string, in first-appearance order).
#[derive(Clone, Debug, Default)]
pub struct ParsedLog {
    pub checkins: Vec<CheckIn>,
    pub user_ids: Vec<String>,
    pub poi_ids: Vec<String>,
    pub category_ids: Vec<String>,
    pub category_names: Vec<String>,
    pub malformed_rows: usize,
}

impl ParsedLog {
    pub fn catalog(&self) -> PoiCatalog {
        build_catalog(&self.checkins, self.poi_ids.len(), self.category_ids.len())
    }
}

pub fn build_catalog(checkins: &[CheckIn], poi_count: usize, category_count: usize) -> PoiCatalog {
    let mut pois = vec![
        PoiInfo {
            category_id: 0,
            lat: 0.0,
            lon: 0.0,
            checkin_count: 0,
        };
        poi_count
    ];
    let mut seen = vec![false; poi_count];
    for c in checkins {
        let info = &mut pois[c.poi_id];
        if !seen[c.poi_id] {
            info.category_id = c.category_id;
            info.lat = c.lat;
            info.lon = c.lon;
            seen[c.poi_id] = true;
        }
        info.checkin_count += 1;
    }
    PoiCatalog {
        pois,
        category_count,
    }
}

fn intern(map: &mut HashMap<String, usize>, names: &mut Vec<String>, raw: &str) -> usize {
    if let Some(&id) = map.get(raw) {
        return id;
    }
    let id = names.len();
    map.insert(raw.to_string(), id);
    names.push(raw.to_string());
    id
}

/// Parse a tab-separated check-in log with 8 columns:
/// raw_user_id, raw_poi_id, raw_category_id, category_name, lat, lon,
/// tz_offset_minutes, utc_time ("Tue Apr 03 18:00:06 +0000 2012").
///
/// Raw ids are remapped to dense integers in first-appearance order.
/// Malformed rows are counted and skipped; more than 1% malformed is a
/// format error naming the first offending line.
pub fn parse_checkins(path: &Path) -> Result<ParsedLog> {
    // some public check-in dumps are not valid UTF-8
    let bytes = fs::read(path)?;
    let text = String::from_utf8_lossy(&bytes);

    let mut log = ParsedLog::default();
    let mut user_map = HashMap::new();
    let mut poi_map = HashMap::new();
    let mut cat_map = HashMap::new();
    let mut first_bad_line = 0usize;
    let mut total_rows = 0usize;

    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        total_rows += 1;
        match parse_row(line) {
            Some(row) => {
                let user_id = intern(&mut user_map, &mut log.user_ids, row.user);
                let poi_id = intern(&mut poi_map, &mut log.poi_ids, row.poi);
                let category_id = intern(&mut cat_map, &mut log.category_ids, row.cat);
                if category_id == log.category_names.len() {
                    log.category_names.push(row.cat_name.to_string());
                }
                log.checkins.push(CheckIn {
                    user_id,
                    poi_id,
                    category_id,
                    lat: row.lat,
                    lon: row.lon,
                    utc_timestamp: row.utc,
                    tz_offset_minutes: row.tz,
                });
            }
            None => {
                log.malformed_rows += 1;
                if first_bad_line == 0 {
                    first_bad_line = lineno + 1;
                }
            }
        }
    }

    if total_rows > 0 && log.malformed_rows as f64 > 0.01 * total_rows as f64 {
        return Err(CoreError::Format {
            line: first_bad_line,
            message: format!(
                "{} of {} rows malformed (limit 1%)",
                log.malformed_rows, total_rows
            ),
        });
    }
    Ok(log)
}

struct Row<'a> {
    user: &'a str,
    poi: &'a str,
    cat: &'a str,
    cat_name: &'a str,
    lat: f64,
    lon: f64,
    tz: i32,
    utc: i64,
}

fn parse_row(line: &str) -> Option<Row<'_>> {
    let mut cols = line.split('\t');
    let user = cols.next()?;
    let poi = cols.next()?;
    let cat = cols.next()?;
    let cat_name = cols.next()?;
    let lat: f64 = cols.next()?.trim().parse().ok()?;
    let lon: f64 = cols.next()?.trim().parse().ok()?;
    let tz: i32 = cols.next()?.trim().parse().ok()?;
    let time = cols.next()?.trim();
    if cols.next().is_some() {
        return None;
    }
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return None;
    }
    let utc = DateTime::parse_from_str(time, "%a %b %d %H:%M:%S %z %Y")
        .ok()?
        .timestamp();
    Some(Row {
        user,
        poi,
        cat,
        cat_name,
        lat,
        lon,
        tz,
        utc,
    })
}
