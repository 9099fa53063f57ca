//! Per-domain BPR matrix factorization backbones.
//!
//! A backbone is trained once per domain and then frozen; everything
//! downstream only reads it.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

const TABLE_MAGIC: &[u8; 4] = b"CDRE";
const INIT_STD: f64 = 0.1;

/// User and item embeddings of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    domain_id: String,
    users: Array2<f32>,
    items: Array2<f32>,
    frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BprHyper {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    /// Set from the experiment seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for BprHyper {
    fn default() -> Self {
        Self { dim: 64, learning_rate: 0.05, l2_reg: 1e-4, epochs: 50, negatives_per_positive: 1, seed: 0 }
    }
}

impl BprHyper {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dim < 2 {
            problems.push("bpr dim must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("bpr learning_rate must be positive");
        }
        if !(self.l2_reg > 0.0 && self.l2_reg.is_finite()) {
            problems.push("bpr l2_reg must be positive");
        }
        if self.epochs == 0 || self.negatives_per_positive == 0 {
            problems.push("bpr epochs and negatives_per_positive must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-triple BPR objective `-ln sigma(u.(p - n)) + reg/2 (|u|^2 + |p|^2 + |n|^2)`
/// and its gradients with respect to `u`, `p` and `n`.
pub fn bpr_triple_loss_and_grad(
    u: &[f64],
    pos: &[f64],
    neg: &[f64],
    reg: f64,
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let x: f64 = u.iter().zip(pos.iter().zip(neg)).map(|(a, (p, n))| a * (p - n)).sum();
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    // -ln sigma(x) = softplus(-x)
    let loss = (-x).max(0.0) + (-x.abs()).exp().ln_1p() + 0.5 * reg * (sq(u) + sq(pos) + sq(neg));
    let g = sigmoid(-x);
    let du = u.iter().zip(pos.iter().zip(neg)).map(|(a, (p, n))| -g * (p - n) + reg * a).collect();
    let dp = u.iter().zip(pos).map(|(a, p)| -g * a + reg * p).collect();
    let dn = u.iter().zip(neg).map(|(a, n)| g * a + reg * n).collect();
    (loss, du, dp, dn)
}

fn sample_negative<R: Rng>(rng: &mut R, positives: &[u32], num_items: usize) -> Option<usize> {
    if positives.len() >= num_items {
        return None;
    }
    loop {
        let j = rng.gen_range(0..num_items);
        if positives.binary_search(&(j as u32)).is_err() {
            return Some(j);
        }
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// One SGD step on a triple, updating rows in place. Returns the loss.
fn sgd_triple(users: &mut Array2<f64>, items: &mut Array2<f64>, u: usize, i: usize, j: usize, lr: f64, reg: f64) -> f64 {
    let uv = users.row(u).to_vec();
    let pv = items.row(i).to_vec();
    let nv = items.row(j).to_vec();
    let (loss, du, dp, dn) = bpr_triple_loss_and_grad(&uv, &pv, &nv, reg);
    users.row_mut(u).zip_mut_with(&Array1::from(du), |w, g| *w -= lr * g);
    items.row_mut(i).zip_mut_with(&Array1::from(dp), |w, g| *w -= lr * g);
    items.row_mut(j).zip_mut_with(&Array1::from(dn), |w, g| *w -= lr * g);
    loss
}

fn run_epochs(
    users: &mut Array2<f64>,
    items: &mut Array2<f64>,
    ds: &InteractionDataset,
    hyper: &BprHyper,
    rng: &mut ChaCha8Rng,
    domain: &str,
) -> Result<Vec<f64>> {
    let mut pairs: Vec<(usize, usize)> = ds.pairs().collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        pairs.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &(u, i) in &pairs {
            for _ in 0..hyper.negatives_per_positive {
                let Some(j) = sample_negative(rng, ds.user_items(u), ds.num_items()) else { continue };
                total += sgd_triple(users, items, u, i, j, hyper.learning_rate, hyper.l2_reg);
                count += 1;
            }
        }
        let mean = total / count.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        log::debug!("bpr[{domain}] epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}

/// Trains a fresh, unfrozen table on `ds`.
pub fn train_bpr(ds: &InteractionDataset, hyper: &BprHyper) -> Result<EmbeddingTable> {
    hyper.validate()?;
    if ds.num_interactions() == 0 {
        return Err(Error::DegenerateDataset(ds.domain_id().to_owned()));
    }
    let mut table = EmbeddingTable::initial(ds, hyper);
    table.resume_bpr(ds, hyper)?;
    Ok(table)
}

/// Learns a single user vector against frozen item embeddings, mimicking
/// what BPR training would have produced for that user. Used to obtain a
/// target-space reference for users the backbone never saw.
pub fn fold_in_user(table: &EmbeddingTable, positives: &[u32], hyper: &BprHyper, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let mut u: Vec<f64> = (0..table.dim()).map(|_| normal.sample(&mut rng)).collect();
    let mut order = positives.to_vec();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            for _ in 0..hyper.negatives_per_positive {
                let Some(j) = sample_negative(&mut rng, positives, table.num_items()) else { continue };
                let pos = table.item_f64(i as usize);
                let neg = table.item_f64(j);
                let (_, du, _, _) = bpr_triple_loss_and_grad(&u, &pos, &neg, hyper.l2_reg);
                for (w, g) in u.iter_mut().zip(du) {
                    *w -= hyper.learning_rate * g;
                }
            }
        }
    }
    u
}

impl EmbeddingTable {
    pub fn new(domain_id: impl Into<String>, users: Array2<f32>, items: Array2<f32>) -> Result<Self> {
        if users.ncols() != items.ncols() {
            return Err(Error::DimMismatch { expected: users.ncols(), actual: items.ncols() });
        }
        if users.iter().chain(items.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Format("embedding table has non-finite entries".into()));
        }
        Ok(Self { domain_id: domain_id.into(), users, items, frozen: false })
    }

    fn initial(ds: &InteractionDataset, hyper: &BprHyper) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let users = gaussian_matrix(ds.num_users(), hyper.dim, &mut rng).mapv(|x| x as f32);
        let items = gaussian_matrix(ds.num_items(), hyper.dim, &mut rng).mapv(|x| x as f32);
        Self { domain_id: ds.domain_id().to_owned(), users, items, frozen: false }
    }

    /// Continues BPR training in place. Rejected once the table is frozen.
    pub fn resume_bpr(&mut self, ds: &InteractionDataset, hyper: &BprHyper) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::FrozenViolation(self.domain_id.clone()));
        }
        hyper.validate()?;
        if ds.num_users() != self.num_users() || ds.num_items() != self.num_items() {
            return Err(Error::DimMismatch { expected: self.num_users(), actual: ds.num_users() });
        }
        if hyper.dim != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), actual: hyper.dim });
        }
        let mut users = self.users.mapv(f64::from);
        let mut items = self.items.mapv(f64::from);
        // offset the stream so resumed epochs do not replay the first ones
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        rng.set_stream(1);
        let history = run_epochs(&mut users, &mut items, ds, hyper, &mut rng, &self.domain_id)?;
        self.users = users.mapv(|x| x as f32);
        self.items = items.mapv(|x| x as f32);
        Ok(history)
    }

    /// Marks the table read-only. Idempotent.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub fn num_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.items.nrows()
    }

    pub fn users(&self) -> &Array2<f32> {
        &self.users
    }

    pub fn items(&self) -> &Array2<f32> {
        &self.items
    }

    pub fn user_row(&self, user: usize) -> Result<ArrayView1<'_, f32>> {
        if user >= self.num_users() {
            return Err(Error::OutOfRange { index: user, len: self.num_users() });
        }
        Ok(self.users.row(user))
    }

    pub fn user_f64(&self, user: usize) -> Result<Vec<f64>> {
        Ok(self.user_row(user)?.iter().map(|&x| f64::from(x)).collect())
    }

    fn item_f64(&self, item: usize) -> Vec<f64> {
        self.items.row(item).iter().map(|&x| f64::from(x)).collect()
    }

    /// Stacks the given users' embeddings as an `n x dim` f64 matrix.
    pub fn user_matrix(&self, users: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((users.len(), self.dim()));
        for (r, &u) in users.iter().enumerate() {
            let row = self.user_row(u)?;
            out.row_mut(r).zip_mut_with(&row, |o, &x| *o = f64::from(x));
        }
        Ok(out)
    }

    /// Dot-product score of an arbitrary user vector against one item.
    pub fn score_vector(&self, user_vec: &[f64], item: usize) -> Result<f64> {
        if item >= self.num_items() {
            return Err(Error::OutOfRange { index: item, len: self.num_items() });
        }
        if user_vec.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), actual: user_vec.len() });
        }
        Ok(self.items.row(item).iter().zip(user_vec).map(|(&v, u)| f64::from(v) * u).sum())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(TABLE_MAGIC);
        w.str(&self.domain_id)
            .u64(self.num_users() as u64)
            .u64(self.num_items() as u64)
            .u64(self.dim() as u64)
            .u8(self.frozen as u8)
            .f32s(self.users.iter().copied())
            .f32s(self.items.iter().copied());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, TABLE_MAGIC)?;
        let domain_id = r.str()?;
        let (nu, ni, dim) = (r.usize()?, r.usize()?, r.usize()?);
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("bad frozen flag {v}"))),
        };
        let users = Array2::from_shape_vec((nu, dim), r.f32s(nu * dim)?).map_err(|e| Error::Format(e.to_string()))?;
        let items = Array2::from_shape_vec((ni, dim), r.f32s(ni * dim)?).map_err(|e| Error::Format(e.to_string()))?;
        r.finish()?;
        let table = Self::new(domain_id, users, items)?;
        Ok(if frozen { table.freeze() } else { table })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized table.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Dot product of a user's and an item's embeddings.
pub fn score(table: &EmbeddingTable, user: usize, item: usize) -> Result<f64> {
    let u = table.user_f64(user)?;
    table.score_vector(&u, item)
}

/// Mean `-ln sigma(u.(p - n))` over all positives with one sampled negative
/// each (no regularization term).
pub fn mean_pair_loss(table: &EmbeddingTable, ds: &InteractionDataset, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0;
    for (u, i) in ds.pairs() {
        if let Some(j) = sample_negative(&mut rng, ds.user_items(u), ds.num_items()) {
            let uv = table.user_f64(u).unwrap();
            let x = table.score_vector(&uv, i).unwrap() - table.score_vector(&uv, j).unwrap();
            total += (-x).max(0.0) + (-x.abs()).exp().ln_1p();
            count += 1;
        }
    }
    total / count.max(1) as f64
}
