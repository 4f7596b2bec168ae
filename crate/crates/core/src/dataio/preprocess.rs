use std::collections::{HashMap, HashSet};

use crate::dataio::parse::{build_catalog, ParsedLog};
use crate::dataio::{CheckIn, PoiCatalog, Trajectory};
use crate::error::{CoreError, Result};
use crate::numcore::rng::{Rng, Stream};

const DAY_SECONDS: i64 = 24 * 3600;

/// Preprocessed dataset with final dense ids (train-first-appearance order).
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    /// Dense id -> raw string id, for users / POIs / categories.
    pub user_ids: Vec<String>,
    pub poi_ids: Vec<String>,
    pub category_ids: Vec<String>,
    pub category_names: Vec<String>,
}

impl DatasetSplit {
    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn poi_count(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn category_count(&self) -> usize {
        self.category_ids.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub users: usize,
    pub pois: usize,
    pub categories: usize,
    pub checkins: usize,
    pub trajectories: usize,
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub split: DatasetSplit,
    pub catalog: PoiCatalog,
    pub stats: DatasetStats,
}

/// Iteratively remove POIs and users with fewer than `min_count` check-ins
/// until a fixed point: removing a sparse POI can push a user under the
/// threshold and vice versa.
pub fn filter_min_activity(checkins: &[CheckIn], min_count: usize) -> Result<Vec<CheckIn>> {
    let mut current: Vec<CheckIn> = checkins.to_vec();
    loop {
        let mut poi_counts: HashMap<usize, usize> = HashMap::new();
        let mut user_counts: HashMap<usize, usize> = HashMap::new();
        for c in &current {
            *poi_counts.entry(c.poi_id).or_default() += 1;
            *user_counts.entry(c.user_id).or_default() += 1;
        }
        let before = current.len();
        current.retain(|c| {
            poi_counts[&c.poi_id] >= min_count && user_counts[&c.user_id] >= min_count
        });
        if current.len() == before {
            break;
        }
    }
    if current.is_empty() {
        return Err(CoreError::DegenerateDataset(
            "no check-ins survive the minimum-activity filter".into(),
        ));
    }
    Ok(current)
}

/// Per user, ordered by local time, a new trajectory starts whenever the gap
/// to the previous check-in exceeds 24 hours. Length-1 trajectories are
/// removed as outliers.
pub fn segment_trajectories(checkins: &[CheckIn]) -> Vec<Trajectory> {
    let mut sorted: Vec<CheckIn> = checkins.to_vec();
    sorted.sort_by_key(|c| (c.user_id, c.local_timestamp()));

    let mut trajectories = Vec::new();
    let mut current: Vec<CheckIn> = Vec::new();
    let push = |buf: &mut Vec<CheckIn>, out: &mut Vec<Trajectory>| {
        if buf.len() >= 2 {
            out.push(Trajectory {
                trajectory_id: out.len(),
                user_id: buf[0].user_id,
                checkins: std::mem::take(buf),
            });
        } else {
            buf.clear();
        }
    };
    for c in sorted {
        let boundary = match current.last() {
            Some(prev) => {
                prev.user_id != c.user_id
                    || c.local_timestamp() - prev.local_timestamp() > DAY_SECONDS
            }
            None => false,
        };
        if boundary {
            push(&mut current, &mut trajectories);
        }
        current.push(c);
    }
    push(&mut current, &mut trajectories);
    trajectories
}

/// Shuffle by seed, partition 80/10/10 by trajectory, then drop evaluation
/// trajectories containing any user or POI absent from train.
pub fn split_random(
    trajectories: &[Trajectory],
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>, Vec<Trajectory>)> {
    let n = trajectories.len();
    if n < 10 {
        return Err(CoreError::DegenerateDataset(format!(
            "need at least 10 trajectories to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed, Stream::Split).shuffle(&mut order);

    let n_train = n * 8 / 10;
    let n_val = (n - n_train) / 2;
    let train: Vec<Trajectory> = order[..n_train]
        .iter()
        .map(|&i| trajectories[i].clone())
        .collect();
    let mut val: Vec<Trajectory> = order[n_train..n_train + n_val]
        .iter()
        .map(|&i| trajectories[i].clone())
        .collect();
    let mut test: Vec<Trajectory> = order[n_train + n_val..]
        .iter()
        .map(|&i| trajectories[i].clone())
        .collect();

    let mut train_users = HashSet::new();
    let mut train_pois = HashSet::new();
    for t in &train {
        for c in &t.checkins {
            train_users.insert(c.user_id);
            train_pois.insert(c.poi_id);
        }
    }
    let keep = |t: &Trajectory| {
        t.checkins
            .iter()
            .all(|c| train_users.contains(&c.user_id) && train_pois.contains(&c.poi_id))
    };
    val.retain(keep);
    test.retain(keep);
    Ok((train, val, test))
}

/// Full pipeline: activity filter, segmentation, split, exclusion, then a
/// final dense re-index in train-first-appearance order.
pub fn preprocess(log: &ParsedLog, min_count: usize, seed: u64) -> Result<Preprocessed> {
    let filtered = filter_min_activity(&log.checkins, min_count)?;

    let mut users = HashSet::new();
    let mut pois = HashSet::new();
    let mut cats = HashSet::new();
    for c in &filtered {
        users.insert(c.user_id);
        pois.insert(c.poi_id);
        cats.insert(c.category_id);
    }
    let trajectories = segment_trajectories(&filtered);
    let stats = DatasetStats {
        users: users.len(),
        pois: pois.len(),
        categories: cats.len(),
        checkins: filtered.len(),
        trajectories: trajectories.len(),
    };

    let (train, val, test) = split_random(&trajectories, seed)?;

    // re-index over train entities; exclusion guarantees val/test only
    // reference those
    let mut user_map: HashMap<usize, usize> = HashMap::new();
    let mut poi_map: HashMap<usize, usize> = HashMap::new();
    let mut cat_map: HashMap<usize, usize> = HashMap::new();
    let mut split = DatasetSplit::default();
    for t in &train {
        for c in &t.checkins {
            user_map.entry(c.user_id).or_insert_with(|| {
                split.user_ids.push(log.user_ids[c.user_id].clone());
                split.user_ids.len() - 1
            });
            poi_map.entry(c.poi_id).or_insert_with(|| {
                split.poi_ids.push(log.poi_ids[c.poi_id].clone());
                split.poi_ids.len() - 1
            });
            cat_map.entry(c.category_id).or_insert_with(|| {
                split.category_ids.push(log.category_ids[c.category_id].clone());
                split
                    .category_names
                    .push(log.category_names[c.category_id].clone());
                split.category_ids.len() - 1
            });
        }
    }
    let remap = |ts: &[Trajectory]| -> Vec<Trajectory> {
        ts.iter()
            .enumerate()
            .map(|(i, t)| Trajectory {
                trajectory_id: i,
                user_id: user_map[&t.user_id],
                checkins: t
                    .checkins
                    .iter()
                    .map(|c| CheckIn {
                        user_id: user_map[&c.user_id],
                        poi_id: poi_map[&c.poi_id],
                        category_id: cat_map[&c.category_id],
                        ..c.clone()
                    })
                    .collect(),
            })
            .collect()
    };
    split.train = remap(&train);
    split.validation = remap(&val);
    split.test = remap(&test);

    let train_checkins: Vec<CheckIn> = split
        .train
        .iter()
        .flat_map(|t| t.checkins.iter().cloned())
        .collect();
    let catalog = build_catalog(
        &train_checkins,
        split.poi_ids.len(),
        split.category_ids.len(),
    );

    Ok(Preprocessed {
        split,
        catalog,
        stats,
    })
}
