use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::InteractionDataset;
use crate::error::{Error, Result};

pub const SPLIT_FORMAT_VERSION: u32 = 1;

/// Transfer direction of a cold-start cohort.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    XToY,
    YToX,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::XToY, Direction::YToX];

    pub fn label(self) -> &'static str {
        match self {
            Direction::XToY => "x_to_y",
            Direction::YToX => "y_to_x",
        }
    }

    pub fn reverse(self) -> Self {
        match self {
            Direction::XToY => Direction::YToX,
            Direction::YToX => Direction::XToY,
        }
    }
}

/// A held-out user: known in the source domain, evaluated in the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartRecord {
    pub user_id: String,
    pub source_user: usize,
    pub target_user: usize,
    pub held_out_item: usize,
    /// Sorted, distinct target items the user never interacted with.
    pub negatives: Vec<usize>,
}

impl ColdStartRecord {
    /// Positive first, then negatives.
    pub fn candidates(&self) -> Vec<usize> {
        std::iter::once(self.held_out_item).chain(self.negatives.iter().copied()).collect()
    }
}

/// Overlap partition and cold-start cohorts for a two-domain scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdrSplit {
    pub format_version: u32,
    pub seed: u64,
    pub eta: f64,
    pub coldstart_frac: f64,
    pub domain_x: String,
    pub domain_y: String,
    pub x_user_ids: Vec<String>,
    pub x_item_ids: Vec<String>,
    pub y_user_ids: Vec<String>,
    pub y_item_ids: Vec<String>,
    /// Every `(x_index, y_index)` pair sharing an external id.
    pub overlap_users: Vec<(usize, usize)>,
    /// Non-held-out overlap users in seeded order; the adapter trains on a
    /// prefix of this list, so smaller `eta` values give nested subsets.
    pub available_overlap_users: Vec<(usize, usize)>,
    pub train_overlap_users: Vec<(usize, usize)>,
    pub test_x_to_y: Vec<ColdStartRecord>,
    pub test_y_to_x: Vec<ColdStartRecord>,
    pub validation_x_to_y: Vec<ColdStartRecord>,
    pub validation_y_to_x: Vec<ColdStartRecord>,
    pub num_negatives: usize,
}

fn eta_count(eta: f64, available: usize) -> usize {
    ((eta * available as f64) - 1e-9).ceil().max(0.0) as usize
}

fn check_ratio(name: &str, v: f64, allow_one: bool) -> Result<()> {
    let ok = v > 0.0 && (v < 1.0 || (allow_one && v == 1.0));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {v} outside its allowed range")))
    }
}

/// Partitions the overlapping users of `ds_x` and `ds_y`.
///
/// A user overlaps when the same external id has at least one interaction
/// in both datasets. `coldstart_frac` of them are withheld: the first half
/// of that holdout transfers X to Y, the rest Y to X, and each direction is
/// split evenly into validation and test users. Of the remaining overlap
/// users, `ceil(eta * n)` are used to train cross-domain models.
pub fn make_cdr_split(
    ds_x: &InteractionDataset,
    ds_y: &InteractionDataset,
    eta: f64,
    coldstart_frac: f64,
    seed: u64,
) -> Result<CdrSplit> {
    check_ratio("eta", eta, true)?;
    check_ratio("coldstart_frac", coldstart_frac, false)?;

    let overlap_users: Vec<(usize, usize)> = ds_x
        .active_users()
        .into_iter()
        .filter_map(|ux| {
            let uy = ds_y.user_index(ds_x.user_id(ux))?;
            (!ds_y.user_items(uy).is_empty()).then_some((ux, uy))
        })
        .collect();
    let min_overlap = (2.0 / coldstart_frac).ceil() as usize;
    if overlap_users.len() < min_overlap {
        return Err(Error::SplitInfeasible(format!(
            "{} overlapping users, need at least {min_overlap}",
            overlap_users.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = overlap_users.clone();
    order.shuffle(&mut rng);
    let holdout_n = (coldstart_frac * order.len() as f64).floor() as usize;
    let (holdout, available) = order.split_at(holdout_n);
    let (to_y, to_x) = holdout.split_at(holdout_n.div_ceil(2));

    let mut make_records = |pairs: &[(usize, usize)], dir: Direction| -> Vec<ColdStartRecord> {
        pairs
            .iter()
            .map(|&(ux, uy)| {
                let (source_user, target_user, target) = match dir {
                    Direction::XToY => (ux, uy, ds_y),
                    Direction::YToX => (uy, ux, ds_x),
                };
                let positives = target.user_items(target_user);
                let held_out_item = positives[rng.gen_range(0..positives.len())] as usize;
                ColdStartRecord {
                    user_id: ds_x.user_id(ux).to_owned(),
                    source_user,
                    target_user,
                    held_out_item,
                    negatives: Vec::new(),
                }
            })
            .collect()
    };
    let mut x_to_y = make_records(to_y, Direction::XToY);
    let mut y_to_x = make_records(to_x, Direction::YToX);
    let test_x_to_y = x_to_y.split_off(x_to_y.len() / 2);
    let test_y_to_x = y_to_x.split_off(y_to_x.len() / 2);

    let available_overlap_users = available.to_vec();
    let train_overlap_users = available[..eta_count(eta, available.len())].to_vec();

    Ok(CdrSplit {
        format_version: SPLIT_FORMAT_VERSION,
        seed,
        eta,
        coldstart_frac,
        domain_x: ds_x.domain_id().to_owned(),
        domain_y: ds_y.domain_id().to_owned(),
        x_user_ids: ds_x.user_ids().to_vec(),
        x_item_ids: ds_x.item_ids().to_vec(),
        y_user_ids: ds_y.user_ids().to_vec(),
        y_item_ids: ds_y.item_ids().to_vec(),
        overlap_users,
        available_overlap_users,
        train_overlap_users,
        test_x_to_y,
        test_y_to_x,
        validation_x_to_y: x_to_y,
        validation_y_to_x: y_to_x,
        num_negatives: 0,
    })
}

fn draw_negatives(
    record: &mut ColdStartRecord,
    target: &InteractionDataset,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let positives = target.user_items(record.target_user);
    let pool: Vec<usize> = (0..target.num_items())
        .filter(|&i| positives.binary_search(&(i as u32)).is_err())
        .collect();
    if pool.len() < n {
        return Err(Error::SamplingInfeasible(format!(
            "user `{}` has {} candidate negatives in `{}`, need {n}",
            record.user_id,
            pool.len(),
            target.domain_id()
        )));
    }
    let mut negatives: Vec<usize> = rand::seq::index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    negatives.sort_unstable();
    record.negatives = negatives;
    Ok(())
}

/// Fills every cold-start record with `n` distinct negatives drawn uniformly
/// from the target domain's items minus that user's positives.
pub fn sample_negatives(
    mut split: CdrSplit,
    ds_x: &InteractionDataset,
    ds_y: &InteractionDataset,
    n: usize,
    seed: u64,
) -> Result<CdrSplit> {
    split.check_matches(ds_x, ds_y)?;
    for dir in Direction::BOTH {
        let target = match dir {
            Direction::XToY => ds_y,
            Direction::YToX => ds_x,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match dir {
            Direction::XToY => 1,
            Direction::YToX => 2,
        });
        let (validation, test) = split.cohorts_mut(dir);
        for record in validation.iter_mut().chain(test.iter_mut()) {
            draw_negatives(record, target, n, &mut rng)?;
        }
    }
    split.num_negatives = n;
    Ok(split)
}

impl CdrSplit {
    fn cohorts_mut(&mut self, dir: Direction) -> (&mut Vec<ColdStartRecord>, &mut Vec<ColdStartRecord>) {
        match dir {
            Direction::XToY => (&mut self.validation_x_to_y, &mut self.test_x_to_y),
            Direction::YToX => (&mut self.validation_y_to_x, &mut self.test_y_to_x),
        }
    }

    pub fn test(&self, dir: Direction) -> &[ColdStartRecord] {
        match dir {
            Direction::XToY => &self.test_x_to_y,
            Direction::YToX => &self.test_y_to_x,
        }
    }

    pub fn validation(&self, dir: Direction) -> &[ColdStartRecord] {
        match dir {
            Direction::XToY => &self.validation_x_to_y,
            Direction::YToX => &self.validation_y_to_x,
        }
    }

    /// Same holdout and negatives, different training fraction.
    pub fn with_eta(&self, eta: f64) -> Result<CdrSplit> {
        check_ratio("eta", eta, true)?;
        let mut out = self.clone();
        out.eta = eta;
        out.train_overlap_users =
            self.available_overlap_users[..eta_count(eta, self.available_overlap_users.len())].to_vec();
        Ok(out)
    }

    /// Users of domain X (`x_side = true`) or Y whose interactions there
    /// are withheld from every training stage.
    pub fn withheld_users(&self, x_side: bool) -> HashSet<usize> {
        let records = if x_side {
            [&self.validation_y_to_x, &self.test_y_to_x]
        } else {
            [&self.validation_x_to_y, &self.test_x_to_y]
        };
        records.into_iter().flatten().map(|r| r.target_user).collect()
    }

    /// The interactions of `ds` that training may see.
    pub fn training_dataset(&self, ds: &InteractionDataset, x_side: bool) -> InteractionDataset {
        ds.without_users(&self.withheld_users(x_side))
    }

    pub fn check_matches(&self, ds_x: &InteractionDataset, ds_y: &InteractionDataset) -> Result<()> {
        let same = self.x_user_ids == ds_x.user_ids()
            && self.x_item_ids == ds_x.item_ids()
            && self.y_user_ids == ds_y.user_ids()
            && self.y_item_ids == ds_y.item_ids();
        if same {
            Ok(())
        } else {
            Err(Error::Format("split index maps do not match the datasets".into()))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let split: CdrSplit = serde_json::from_slice(&fs::read(path)?)?;
        if split.format_version != SPLIT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "split format version {} unsupported",
                split.format_version
            )));
        }
        Ok(split)
    }
}
