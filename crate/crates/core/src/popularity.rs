//! Per-POI popularity balancing unique-user counts against check-in counts
//! and recent records against past ones:
//!
//!   raw = beta  * (alpha * users_recent + (1-alpha) * checkins_recent)
//!       + (1-beta) * (alpha * users_past + (1-alpha) * checkins_past)

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::dataio::CheckIn;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug)]
pub struct PopularityParams {
    pub alpha: f64,
    pub beta: f64,
    /// Local timestamp separating "past" from "recent" (recent: ts >= cutoff).
    pub recent_cutoff: i64,
}

impl PopularityParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(CoreError::contract(format!(
                "alpha and beta must lie in [0,1], got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Default cutoff: end of the training span minus `trailing_days`, clamped
/// into the span.
pub fn default_cutoff(train_checkins: &[CheckIn], trailing_days: i64) -> i64 {
    let min = train_checkins
        .iter()
        .map(|c| c.local_timestamp())
        .min()
        .unwrap_or(0);
    let max = train_checkins
        .iter()
        .map(|c| c.local_timestamp())
        .max()
        .unwrap_or(0);
    (max - trailing_days * 86_400).max(min)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoiPopularity {
    pub users_recent: usize,
    pub checkins_recent: usize,
    pub users_past: usize,
    pub checkins_past: usize,
    pub raw: f64,
    pub norm: f64,
}

#[derive(Clone, Debug)]
pub struct PopularityTable {
    pub rows: Vec<PoiPopularity>,
    pub params: PopularityParams,
}

impl PopularityTable {
    pub fn norm(&self, poi_id: usize) -> f64 {
        self.rows[poi_id].norm
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "poi_id,users_recent,checkins_recent,users_past,checkins_past,popularity_raw,popularity_norm\n",
        );
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(
                out,
                "{i},{},{},{},{},{},{}",
                r.users_recent, r.checkins_recent, r.users_past, r.checkins_past, r.raw, r.norm
            )
            .unwrap();
        }
        out
    }
}

/// Compute the popularity table over training check-ins only.
pub fn compute_popularity(
    train_checkins: &[CheckIn],
    poi_count: usize,
    params: PopularityParams,
) -> Result<PopularityTable> {
    params.validate()?;
    if train_checkins.is_empty() {
        return Err(CoreError::DegenerateDataset(
            "popularity needs a non-empty training set".into(),
        ));
    }
    let mut rows = vec![PoiPopularity::default(); poi_count];
    let mut recent_users: Vec<HashSet<usize>> = vec![HashSet::new(); poi_count];
    let mut past_users: Vec<HashSet<usize>> = vec![HashSet::new(); poi_count];
    for c in train_checkins {
        if c.local_timestamp() >= params.recent_cutoff {
            rows[c.poi_id].checkins_recent += 1;
            recent_users[c.poi_id].insert(c.user_id);
        } else {
            rows[c.poi_id].checkins_past += 1;
            past_users[c.poi_id].insert(c.user_id);
        }
    }
    for (i, r) in rows.iter_mut().enumerate() {
        r.users_recent = recent_users[i].len();
        r.users_past = past_users[i].len();
        let (a, b) = (params.alpha, params.beta);
        r.raw = b * (a * r.users_recent as f64 + (1.0 - a) * r.checkins_recent as f64)
            + (1.0 - b) * (a * r.users_past as f64 + (1.0 - a) * r.checkins_past as f64);
    }
    let lo = rows.iter().map(|r| r.raw).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.raw).fold(f64::NEG_INFINITY, f64::max);
    for r in &mut rows {
        // all-equal raw values map to 0.5
        r.norm = if hi > lo { (r.raw - lo) / (hi - lo) } else { 0.5 };
    }
    Ok(PopularityTable { rows, params })
}

/// One independent table per (alpha, beta) pair.
pub fn sweep_grid(
    train_checkins: &[CheckIn],
    poi_count: usize,
    recent_cutoff: i64,
    alphas: &[f64],
    betas: &[f64],
) -> Result<Vec<((f64, f64), PopularityTable)>> {
    let mut out = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            let params = PopularityParams {
                alpha,
                beta,
                recent_cutoff,
            };
            out.push(((alpha, beta), compute_popularity(train_checkins, poi_count, params)?));
        }
    }
    Ok(out)
}
