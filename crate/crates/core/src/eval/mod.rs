//! Leave-one-out ranking evaluation.
//!
//! Each cold-start user ranks one held-out positive against sampled
//! negatives by dot product with the transferred user vector. Ties go to
//! the lower item index so results are reproducible bit for bit.

mod analysis;

pub use analysis::{avg_latent_distance, kl_disentanglement, KlReport, VARIANCE_FLOOR};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CdrSplit, ColdStartRecord, Direction};
use crate::error::{Error, Result};
use crate::pretrain::EmbeddingTable;

pub const DEFAULT_KS: [usize; 2] = [10, 20];

fn check_rank(rank: usize) -> Result<()> {
    if rank == 0 {
        Err(Error::OutOfRange { index: 0, len: 0 })
    } else {
        Ok(())
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::InvalidCutoff)
    } else {
        Ok(())
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> Result<f64> {
    check_rank(rank)?;
    check_k(k)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` inside the cutoff.
pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    check_rank(rank)?;
    check_k(k)?;
    Ok(if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

pub fn mrr(rank: usize) -> Result<f64> {
    check_rank(rank)?;
    Ok(1.0 / rank as f64)
}

/// Sorts `candidates` by descending score, ties by ascending item index.
pub fn rank_candidates(
    u_hat: &[f64],
    table: &EmbeddingTable,
    candidates: &[usize],
    expected_len: usize,
) -> Result<Vec<usize>> {
    if candidates.len() != expected_len {
        return Err(Error::CandidateCount { expected: expected_len, actual: candidates.len() });
    }
    let mut scored = candidates
        .iter()
        // `+ 0.0` folds -0.0 into 0.0 so total_cmp sees them as a tie
        .map(|&i| Ok((table.score_vector(u_hat, i)? + 0.0, i)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// 1-based position of `positive` among `positive + negatives` under the
/// ordering of [`rank_candidates`], without sorting.
pub fn positive_rank(u_hat: &[f64], table: &EmbeddingTable, positive: usize, negatives: &[usize]) -> Result<usize> {
    let target = table.score_vector(u_hat, positive)?;
    let mut rank = 1;
    for &j in negatives {
        let s = table.score_vector(u_hat, j)?;
        if s > target || (s == target && j < positive) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Mean per-user metrics over a cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub n_users: usize,
}

impl RankingMetrics {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let n = ranks.len() as f64;
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in ks {
            let (mut h, mut g) = (0.0, 0.0);
            for &r in ranks {
                h += hr_at_k(r, k)?;
                g += ndcg_at_k(r, k)?;
            }
            hr.insert(k, h / n);
            ndcg.insert(k, g / n);
        }
        let mut m = 0.0;
        for &r in ranks {
            m += mrr(r)?;
        }
        Ok(Self { hr, ndcg, mrr: m / n, n_users: ranks.len() })
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Unweighted mean of several cohorts' metrics.
    pub fn macro_average(parts: &[&RankingMetrics]) -> Result<Self> {
        let Some(first) = parts.first() else { return Err(Error::EmptyCohort) };
        let n = parts.len() as f64;
        let avg = |f: &dyn Fn(&RankingMetrics) -> f64| parts.iter().map(|m| f(m)).sum::<f64>() / n;
        Ok(Self {
            hr: first.hr.keys().map(|&k| (k, avg(&|m| m.hr_at(k)))).collect(),
            ndcg: first.ndcg.keys().map(|&k| (k, avg(&|m| m.ndcg_at(k)))).collect(),
            mrr: avg(&|m| m.mrr),
            n_users: parts.iter().map(|m| m.n_users).sum(),
        })
    }
}

/// Ranks every record of a cohort. `transfer` maps a record to the user
/// vector in the target space. Parallel over users, merged in input order.
pub fn cohort_ranks<F>(records: &[ColdStartRecord], target: &EmbeddingTable, transfer: F) -> Result<Vec<usize>>
where
    F: Fn(&ColdStartRecord) -> Result<Vec<f64>> + Sync,
{
    records
        .par_iter()
        .map(|r| {
            let u_hat = transfer(r)?;
            positive_rank(&u_hat, target, r.held_out_item, &r.negatives)
        })
        .collect()
}

pub fn evaluate_records<F>(
    records: &[ColdStartRecord],
    target: &EmbeddingTable,
    ks: &[usize],
    transfer: F,
) -> Result<RankingMetrics>
where
    F: Fn(&ColdStartRecord) -> Result<Vec<f64>> + Sync,
{
    RankingMetrics::from_ranks(&cohort_ranks(records, target, transfer)?, ks)
}

/// Which held-out users to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Validation,
    Test,
}

/// Per-direction and macro-averaged metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub x_to_y: Option<RankingMetrics>,
    pub y_to_x: Option<RankingMetrics>,
    pub macro_avg: RankingMetrics,
}

impl ColdStartReport {
    pub fn direction(&self, dir: Direction) -> Option<&RankingMetrics> {
        match dir {
            Direction::XToY => self.x_to_y.as_ref(),
            Direction::YToX => self.y_to_x.as_ref(),
        }
    }
}

/// Leave-one-out evaluation of both transfer directions.
///
/// `transfer(dir, record)` returns the inferred target-domain vector for
/// the record's user; the target table is `tables.1` for X to Y and
/// `tables.0` for Y to X.
pub fn evaluate_cold_start<F>(
    split: &CdrSplit,
    tables: (&EmbeddingTable, &EmbeddingTable),
    ks: &[usize],
    cohort: Cohort,
    transfer: F,
) -> Result<ColdStartReport>
where
    F: Fn(Direction, &ColdStartRecord) -> Result<Vec<f64>> + Sync,
{
    for &k in ks {
        check_k(k)?;
    }
    let mut per_dir = Vec::new();
    for dir in Direction::BOTH {
        let records = match cohort {
            Cohort::Test => split.test(dir),
            Cohort::Validation => split.validation(dir),
        };
        if records.is_empty() {
            per_dir.push(None);
            continue;
        }
        let target = match dir {
            Direction::XToY => tables.1,
            Direction::YToX => tables.0,
        };
        per_dir.push(Some(evaluate_records(records, target, ks, |r| transfer(dir, r))?));
    }
    let present: Vec<&RankingMetrics> = per_dir.iter().flatten().collect();
    let macro_avg = RankingMetrics::macro_average(&present)?;
    let y_to_x = per_dir.pop().unwrap();
    let x_to_y = per_dir.pop().unwrap();
    Ok(ColdStartReport { x_to_y, y_to_x, macro_avg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn metric_examples() {
        assert_eq!((hr_at_k(1, 10).unwrap(), ndcg_at_k(1, 10).unwrap(), mrr(1).unwrap()), (1.0, 1.0, 1.0));
        assert_eq!(ndcg_at_k(3, 10).unwrap(), 0.5);
        assert!((mrr(3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((hr_at_k(11, 10).unwrap(), ndcg_at_k(11, 10).unwrap()), (0.0, 0.0));
        assert!((mrr(11).unwrap() - 1.0 / 11.0).abs() < 1e-15);
        assert!(matches!(hr_at_k(1, 0), Err(Error::InvalidCutoff)));
        assert!(mrr(0).is_err());
    }

    fn table() -> EmbeddingTable {
        let items = array![[1.0f32, 0.0], [0.0, 1.0], [2.0, 0.0], [1.0, 0.0]];
        EmbeddingTable::new("y", array![[0.0f32, 0.0]], items).unwrap()
    }

    #[test]
    fn highest_scoring_positive_is_first() {
        let t = table();
        assert_eq!(positive_rank(&[1.0, 0.0], &t, 2, &[0, 1, 3]).unwrap(), 1);
        assert_eq!(rank_candidates(&[1.0, 0.0], &t, &[2, 0, 1, 3], 4).unwrap(), vec![2, 0, 3, 1]);
    }

    #[test]
    fn ties_resolve_by_item_index() {
        let t = table();
        // all four items score 0 against the zero vector
        assert_eq!(positive_rank(&[0.0, 0.0], &t, 2, &[0, 1, 3]).unwrap(), 3);
        assert_eq!(rank_candidates(&[0.0, 0.0], &t, &[2, 3, 1, 0], 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn wrong_candidate_count() {
        assert!(matches!(
            rank_candidates(&[1.0, 0.0], &table(), &[0, 1], 1000),
            Err(Error::CandidateCount { expected: 1000, actual: 2 })
        ));
        assert!(matches!(positive_rank(&[1.0, 0.0], &table(), 9, &[0]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn aggregates_are_means() {
        let m = RankingMetrics::from_ranks(&[1, 3, 11, 20], &[10, 20]).unwrap();
        assert_eq!(m.hr_at(10), 0.5);
        assert_eq!(m.hr_at(20), 1.0);
        assert!((m.mrr - (1.0 + 1.0 / 3.0 + 1.0 / 11.0 + 1.0 / 20.0) / 4.0).abs() < 1e-15);
        assert!(matches!(RankingMetrics::from_ranks(&[], &[10]), Err(Error::EmptyCohort)));
    }
}
