//! Top-k accuracy and mean reciprocal rank over ranked POI predictions.

use std::fmt::Write as _;

use crate::error::{CoreError, Result};

/// Acc@k per requested k plus MRR; `count` is the number of predictions m.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub acc: Vec<f64>,
    pub mrr: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn acc_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.acc[i])
    }

    pub fn csv_header(&self) -> String {
        let mut out = String::new();
        for k in &self.ks {
            write!(out, "acc@{k},").unwrap();
        }
        out.push_str("mrr,count");
        out
    }

    pub fn csv_row(&self) -> String {
        let mut out = String::new();
        for a in &self.acc {
            write!(out, "{a},").unwrap();
        }
        write!(out, "{},{}", self.mrr, self.count).unwrap();
        out
    }

    pub fn table_row(&self) -> String {
        let mut out = String::new();
        for (k, a) in self.ks.iter().zip(&self.acc) {
            write!(out, "Acc@{k}={a:.4}  ").unwrap();
        }
        write!(out, "MRR={:.4}  (m={})", self.mrr, self.count).unwrap();
        out
    }
}

/// 1-based rank of `target` under descending score, ties broken by ascending
/// poi id: a tied POI with a smaller id outranks the target.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let ts = scores[target];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > ts || (s == ts && i < target) {
            rank += 1;
        }
    }
    rank
}

/// Aggregate a list of 1-based ranks into Acc@k and MRR.
pub fn report_from_ranks(ranks: &[usize], ks: &[usize]) -> Result<EvalReport> {
    if ranks.is_empty() {
        return Err(CoreError::DegenerateDataset(
            "no predictions to evaluate".into(),
        ));
    }
    let m = ranks.len() as f64;
    let acc = ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / m)
        .collect();
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / m;
    Ok(EvalReport {
        ks: ks.to_vec(),
        acc,
        mrr,
        count: ranks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranks_give_ones() {
        let r = report_from_ranks(&[1, 1, 1], &[1, 5, 10, 20]).unwrap();
        assert_eq!(r.acc, vec![1.0; 4]);
        assert_eq!(r.mrr, 1.0);
    }

    #[test]
    fn single_rank_three() {
        let r = report_from_ranks(&[3], &[1, 5, 10, 20]).unwrap();
        assert_eq!(r.acc_at(1), Some(0.0));
        assert_eq!(r.acc_at(5), Some(1.0));
        assert!((r.mrr - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rank_tie_break_ascending_id() {
        // equal scores everywhere: rank equals target id + 1
        let scores = vec![0.5; 4];
        assert_eq!(rank_of(&scores, 0), 1);
        assert_eq!(rank_of(&scores, 3), 4);
        // strict ordering dominates ties
        let s = vec![1.0, 3.0, 3.0, 0.0];
        assert_eq!(rank_of(&s, 2), 2); // beaten by the tied smaller id 1
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 3), 4);
    }

    #[test]
    fn matches_bruteforce_over_thousand_instances() {
        // deterministic pseudo-random ranking instances, 100 items each
        let mut x: u64 = 2024;
        let mut next = || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            x
        };
        let ks = [1, 5, 10, 20];
        let mut ranks = Vec::new();
        let mut oracle_hits = [0usize; 4];
        let mut oracle_rr = 0.0;
        let n_trials = 1000;
        for _ in 0..n_trials {
            let scores: Vec<f64> = (0..100).map(|_| (next() >> 11) as f64 / (1u64 << 53) as f64).collect();
            let target = (next() % 100) as usize;
            let rank = rank_of(&scores, target);
            ranks.push(rank);
            // brute force: sort indices by (score desc, id asc) and scan
            let mut order: Vec<usize> = (0..100).collect();
            order.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            let pos = order.iter().position(|&i| i == target).unwrap() + 1;
            assert_eq!(rank, pos);
            for (slot, &k) in oracle_hits.iter_mut().zip(&ks) {
                if pos <= k {
                    *slot += 1;
                }
            }
            oracle_rr += 1.0 / pos as f64;
        }
        let report = report_from_ranks(&ranks, &ks).unwrap();
        for i in 0..4 {
            assert_eq!(report.acc[i], oracle_hits[i] as f64 / n_trials as f64);
        }
        assert!((report.mrr - oracle_rr / n_trials as f64).abs() < 1e-12);
        // monotone in k
        for w in report.acc.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert!(report.mrr >= report.acc[0] && report.mrr <= 1.0);
    }

    #[test]
    fn empty_ranks_rejected() {
        assert!(report_from_ranks(&[], &[1]).is_err());
    }
}
