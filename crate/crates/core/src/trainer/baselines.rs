//! Context-free popularity ranking and first-order Markov transition ranking,
//! used as cheap evaluation anchors.

use std::collections::BTreeMap;

use crate::dataio::preprocess::DatasetSplit;
use crate::error::Result;
use crate::popularity::PopularityTable;
use crate::trainer::metrics::{rank_of, report_from_ranks, EvalReport};

/// Transition counts from the training split: row = current POI, entries =
/// times each successor followed it.
#[derive(Clone, Debug, Default)]
pub struct MarkovTable {
    pub counts: BTreeMap<usize, BTreeMap<usize, f64>>,
}

pub fn build_markov_table(split: &DatasetSplit) -> MarkovTable {
    let mut counts: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for t in &split.train {
        for pair in t.checkins.windows(2) {
            *counts
                .entry(pair[0].poi_id)
                .or_default()
                .entry(pair[1].poi_id)
                .or_default() += 1.0;
        }
    }
    MarkovTable { counts }
}

impl MarkovTable {
    /// Scores out of `current`: transition counts, or the popularity order as
    /// a fallback for rows never seen in training. Popularity is scaled below
    /// any positive count so real transitions always dominate.
    pub fn scores(&self, current: usize, poi_count: usize, popularity: &PopularityTable) -> Vec<f64> {
        match self.counts.get(&current) {
            Some(row) => {
                let mut s = vec![0.0; poi_count];
                for (&poi, &c) in row {
                    s[poi] = c;
                }
                s
            }
            None => (0..poi_count).map(|p| popularity.norm(p) * 0.5).collect(),
        }
    }
}

fn eval_prefix_scorer(
    split: &DatasetSplit,
    poi_count: usize,
    ks: &[usize],
    mut score: impl FnMut(usize) -> Vec<f64>,
) -> Result<EvalReport> {
    let mut ranks = Vec::new();
    for t in &split.test {
        for pair in t.checkins.windows(2) {
            let scores = score(pair[0].poi_id);
            debug_assert_eq!(scores.len(), poi_count);
            ranks.push(rank_of(&scores, pair[1].poi_id));
        }
    }
    report_from_ranks(&ranks, ks)
}

/// Rank every POI by popularity, ignoring context entirely.
pub fn baseline_popularity(
    split: &DatasetSplit,
    popularity: &PopularityTable,
    ks: &[usize],
) -> Result<EvalReport> {
    let n = split.poi_count();
    let static_scores: Vec<f64> = (0..n).map(|p| popularity.norm(p)).collect();
    eval_prefix_scorer(split, n, ks, |_| static_scores.clone())
}

/// Rank by train-split transition counts from the current POI.
pub fn baseline_markov(
    split: &DatasetSplit,
    popularity: &PopularityTable,
    ks: &[usize],
) -> Result<EvalReport> {
    let n = split.poi_count();
    let table = build_markov_table(split);
    eval_prefix_scorer(split, n, ks, |current| table.scores(current, n, popularity))
}
