//! Implicit-feedback interaction data for one domain.
//!
//! A dataset maps external string ids for users and items onto dense indices
//! and stores the binary interaction matrix as sorted per-user item lists.

mod split;
mod synthetic;

pub use split::{make_cdr_split, sample_negatives, CdrSplit, ColdStartRecord, Direction};
pub use synthetic::{generate_synthetic, AffineTransform, DomainLatents, GroundTruth, SyntheticConfig};

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_ITEM: usize = 10;
pub const DEFAULT_MIN_USER: usize = 5;

/// One domain's users, items and binary interaction matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct InteractionDataset {
    domain_id: String,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    /// Sorted, de-duplicated item indices per user.
    user_items: Vec<Vec<u32>>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRepr {
    domain_id: String,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    interactions: Vec<(u32, u32)>,
}

impl TryFrom<DatasetRepr> for InteractionDataset {
    type Error = Error;

    fn try_from(repr: DatasetRepr) -> Result<Self> {
        InteractionDataset::from_indexed(repr.domain_id, repr.user_ids, repr.item_ids, repr.interactions)
    }
}

impl From<InteractionDataset> for DatasetRepr {
    fn from(ds: InteractionDataset) -> Self {
        let interactions = ds.pairs().map(|(u, i)| (u as u32, i as u32)).collect();
        DatasetRepr {
            domain_id: ds.domain_id,
            user_ids: ds.user_ids,
            item_ids: ds.item_ids,
            interactions,
        }
    }
}

fn build_index(ids: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::Format(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(index)
}

impl InteractionDataset {
    /// Builds a dataset from already-dense indices. Duplicate pairs collapse.
    pub fn from_indexed(
        domain_id: impl Into<String>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        interactions: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let user_index = build_index(&user_ids, "user")?;
        let item_index = build_index(&item_ids, "item")?;
        let mut user_items = vec![Vec::new(); user_ids.len()];
        for (u, i) in interactions {
            let (u, i) = (u as usize, i as usize);
            if u >= user_ids.len() {
                return Err(Error::OutOfRange { index: u, len: user_ids.len() });
            }
            if i >= item_ids.len() {
                return Err(Error::OutOfRange { index: i, len: item_ids.len() });
            }
            user_items[u].push(i as u32);
        }
        for items in &mut user_items {
            items.sort_unstable();
            items.dedup();
        }
        Ok(Self {
            domain_id: domain_id.into(),
            user_ids,
            item_ids,
            user_items,
            user_index,
            item_index,
        })
    }

    /// Builds a dataset from raw id pairs, assigning indices by first appearance.
    pub fn from_raw_pairs<S: AsRef<str>>(
        domain_id: impl Into<String>,
        pairs: impl IntoIterator<Item = (S, S)>,
    ) -> Result<Self> {
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut indexed = Vec::new();
        for (user, item) in pairs {
            let u = *user_index.entry(user.as_ref().to_owned()).or_insert_with(|| {
                user_ids.push(user.as_ref().to_owned());
                user_ids.len() - 1
            });
            let i = *item_index.entry(item.as_ref().to_owned()).or_insert_with(|| {
                item_ids.push(item.as_ref().to_owned());
                item_ids.len() - 1
            });
            indexed.push((u as u32, i as u32));
        }
        Self::from_indexed(domain_id, user_ids, item_ids, indexed)
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.user_items.iter().map(Vec::len).sum()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.user_ids[user]
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    /// Sorted item indices the user interacted with.
    pub fn user_items(&self, user: usize) -> &[u32] {
        &self.user_items[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_items[user].binary_search(&(item as u32)).is_ok()
    }

    /// All `(user, item)` pairs in user-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i as usize)))
    }

    /// Users with at least one interaction.
    pub fn active_users(&self) -> Vec<usize> {
        (0..self.num_users()).filter(|&u| !self.user_items[u].is_empty()).collect()
    }

    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items()];
        for items in &self.user_items {
            for &i in items {
                counts[i as usize] += 1;
            }
        }
        counts
    }

    /// Copy with every interaction of `users` removed. Index spaces are kept.
    pub fn without_users(&self, users: &HashSet<usize>) -> Self {
        let mut out = self.clone();
        for &u in users {
            if u < out.user_items.len() {
                out.user_items[u].clear();
            }
        }
        out
    }

    /// Keeps only the flagged users and items, re-densifying both index
    /// spaces in their original relative order.
    fn retain(&self, keep_user: &[bool], keep_item: &[bool]) -> Result<Self> {
        let mut item_map = vec![u32::MAX; self.num_items()];
        let mut item_ids = Vec::new();
        for (i, id) in self.item_ids.iter().enumerate() {
            if keep_item[i] {
                item_map[i] = item_ids.len() as u32;
                item_ids.push(id.clone());
            }
        }
        let mut user_ids = Vec::new();
        let mut pairs = Vec::new();
        for (u, id) in self.user_ids.iter().enumerate() {
            if !keep_user[u] {
                continue;
            }
            let nu = user_ids.len() as u32;
            user_ids.push(id.clone());
            for &i in &self.user_items[u] {
                if keep_item[i as usize] {
                    pairs.push((nu, item_map[i as usize]));
                }
            }
        }
        Self::from_indexed(self.domain_id.clone(), user_ids, item_ids, pairs)
    }
}

fn parse_line(line: &str, delimiter: char) -> std::result::Result<(String, String), String> {
    let fields: Vec<&str> = line.split(delimiter).map(str::trim).collect();
    if !(2..=4).contains(&fields.len()) {
        return Err(format!("expected 2 to 4 columns, found {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty user or item id".into());
    }
    for (name, value) in ["rating", "timestamp"].iter().zip(&fields[2..]) {
        if value.parse::<f64>().is_err() {
            return Err(format!("{name} `{value}` is not numeric"));
        }
    }
    Ok((fields[0].to_owned(), fields[1].to_owned()))
}

/// Reads `user_id,item_id[,rating,timestamp]` rows. The delimiter (comma or
/// tab) is detected from the first non-empty line; ratings and timestamps
/// are validated and then dropped.
pub fn load_interactions(path: impl AsRef<Path>, domain_id: &str) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let delimiter = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| if l.contains('\t') { '\t' } else { ',' })
        .ok_or_else(|| Error::EmptyDataset(domain_id.to_owned()))?;

    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair = parse_line(line, delimiter).map_err(|message| Error::Parse {
            path: path.to_owned(),
            line: n + 1,
            message,
        })?;
        pairs.push(pair);
    }
    InteractionDataset::from_raw_pairs(domain_id, pairs)
}

/// Removes items with fewer than `min_item` interactions and users with
/// fewer than `min_user`, repeating until nothing changes.
pub fn filter_min_counts(
    ds: &InteractionDataset,
    min_item: usize,
    min_user: usize,
) -> Result<InteractionDataset> {
    if min_item == 0 || min_user == 0 {
        return Err(Error::InvalidConfig("filter thresholds must be at least 1".into()));
    }
    let mut current = ds.clone();
    loop {
        let item_counts = current.item_counts();
        let keep_item: Vec<bool> = item_counts.iter().map(|&c| c >= min_item).collect();
        let keep_user: Vec<bool> = (0..current.num_users())
            .map(|u| {
                current
                    .user_items(u)
                    .iter()
                    .filter(|&&i| keep_item[i as usize])
                    .count()
                    >= min_user
            })
            .collect();
        if keep_item.iter().all(|&k| k) && keep_user.iter().all(|&k| k) {
            break;
        }
        current = current.retain(&keep_user, &keep_item)?;
        // items that lost every interaction are dropped on the next pass
    }
    if current.num_interactions() == 0 {
        return Err(Error::DegenerateDataset(ds.domain_id.clone()));
    }
    Ok(current)
}
