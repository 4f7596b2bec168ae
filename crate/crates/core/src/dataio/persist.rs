//! On-disk split format.
//!
//! Trajectory files (train.tsv, val.tsv, test.tsv): one trajectory per line,
//! `user_id` followed by tab-separated `poi,category,local_ts,season` tuples.
//!
//! Id map (idmap.tsv): `[users]` / `[pois]` / `[categories]` sections; users
//! are `dense<TAB>raw`, POIs are `dense<TAB>raw<TAB>category<TAB>lat<TAB>lon
//! <TAB>train_freq`, categories are `dense<TAB>raw<TAB>name`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataio::preprocess::DatasetSplit;
use crate::dataio::{assign_season, CheckIn, Hemisphere, PoiCatalog, PoiInfo, Trajectory};
use crate::error::{CoreError, Result};

pub const TRAIN_FILE: &str = "train.tsv";
pub const VAL_FILE: &str = "val.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const IDMAP_FILE: &str = "idmap.tsv";

fn trajectories_to_string(trajectories: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajectories {
        write!(out, "{}", t.user_id).unwrap();
        for c in &t.checkins {
            let season = assign_season(c.local_timestamp(), Hemisphere::North).index();
            write!(
                out,
                "\t{},{},{},{}",
                c.poi_id,
                c.category_id,
                c.local_timestamp(),
                season
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn save_split(dir: &Path, split: &DatasetSplit, catalog: &PoiCatalog) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRAIN_FILE), trajectories_to_string(&split.train))?;
    fs::write(dir.join(VAL_FILE), trajectories_to_string(&split.validation))?;
    fs::write(dir.join(TEST_FILE), trajectories_to_string(&split.test))?;

    let mut idmap = String::from("[users]\n");
    for (i, raw) in split.user_ids.iter().enumerate() {
        writeln!(idmap, "{i}\t{raw}").unwrap();
    }
    idmap.push_str("[pois]\n");
    for (i, raw) in split.poi_ids.iter().enumerate() {
        let info = &catalog.pois[i];
        writeln!(
            idmap,
            "{i}\t{raw}\t{}\t{}\t{}\t{}",
            info.category_id, info.lat, info.lon, info.checkin_count
        )
        .unwrap();
    }
    idmap.push_str("[categories]\n");
    for (i, raw) in split.category_ids.iter().enumerate() {
        writeln!(idmap, "{i}\t{raw}\t{}", split.category_names[i]).unwrap();
    }
    fs::write(dir.join(IDMAP_FILE), idmap)?;
    Ok(())
}

fn parse_trajectories(text: &str, catalog: &PoiCatalog) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CoreError::Format {
            line: lineno + 1,
            message,
        };
        let mut cols = line.split('\t');
        let user_id: usize = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("missing user id".into()))?;
        let mut checkins = Vec::new();
        for tuple in cols {
            let parts: Vec<&str> = tuple.split(',').collect();
            if parts.len() != 4 {
                return Err(err(format!("bad check-in tuple {tuple:?}")));
            }
            let poi_id: usize = parts[0]
                .parse()
                .map_err(|_| err(format!("bad poi {:?}", parts[0])))?;
            let category_id: usize = parts[1]
                .parse()
                .map_err(|_| err(format!("bad category {:?}", parts[1])))?;
            let local_ts: i64 = parts[2]
                .parse()
                .map_err(|_| err(format!("bad timestamp {:?}", parts[2])))?;
            // season column is recomputable from the timestamp; validated only
            let _season: usize = parts[3]
                .parse()
                .map_err(|_| err(format!("bad season {:?}", parts[3])))?;
            let info = catalog
                .pois
                .get(poi_id)
                .ok_or_else(|| err(format!("poi {poi_id} not in id map")))?;
            checkins.push(CheckIn {
                user_id,
                poi_id,
                category_id,
                lat: info.lat,
                lon: info.lon,
                utc_timestamp: local_ts,
                tz_offset_minutes: 0,
            });
        }
        out.push(Trajectory {
            trajectory_id: out.len(),
            user_id,
            checkins,
        });
    }
    Ok(out)
}

pub fn load_split(dir: &Path) -> Result<(DatasetSplit, PoiCatalog)> {
    let idmap = fs::read_to_string(dir.join(IDMAP_FILE))?;
    let mut split = DatasetSplit::default();
    let mut catalog = PoiCatalog::default();
    let mut section = "";
    for (lineno, line) in idmap.lines().enumerate() {
        let err = |message: String| CoreError::Format {
            line: lineno + 1,
            message,
        };
        if line.starts_with('[') {
            section = line;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        match section {
            "[users]" => split.user_ids.push(cols.get(1).unwrap_or(&"").to_string()),
            "[pois]" => {
                if cols.len() != 6 {
                    return Err(err("poi row needs 6 columns".into()));
                }
                split.poi_ids.push(cols[1].to_string());
                catalog.pois.push(PoiInfo {
                    category_id: cols[2]
                        .parse()
                        .map_err(|_| err("bad category id".into()))?,
                    lat: cols[3].parse().map_err(|_| err("bad lat".into()))?,
                    lon: cols[4].parse().map_err(|_| err("bad lon".into()))?,
                    checkin_count: cols[5].parse().map_err(|_| err("bad freq".into()))?,
                });
            }
            "[categories]" => {
                split.category_ids.push(cols.get(1).unwrap_or(&"").to_string());
                split
                    .category_names
                    .push(cols.get(2).unwrap_or(&"").to_string());
            }
            _ => {
                return Err(err(format!("row outside a known section: {line:?}")));
            }
        }
    }
    catalog.category_count = split.category_ids.len();

    split.train = parse_trajectories(&fs::read_to_string(dir.join(TRAIN_FILE))?, &catalog)?;
    split.validation = parse_trajectories(&fs::read_to_string(dir.join(VAL_FILE))?, &catalog)?;
    split.test = parse_trajectories(&fs::read_to_string(dir.join(TEST_FILE))?, &catalog)?;
    Ok((split, catalog))
}
