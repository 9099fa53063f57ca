//! Latent-factor generator for multi-domain scenarios with known ground truth.
//!
//! Shared users draw one latent `z`; in domain `d` their representation is
//! `A_d z + b_d + noise`. Each user interacts with the top `q` fraction of
//! that domain's items by dot product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::InteractionDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineTransform {
    /// Row-major `latent_dim x latent_dim`.
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|r| (0..dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { matrix, offset: vec![0.0; dim] }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| row.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_domains: usize,
    pub latent_dim: usize,
    pub users_per_domain: usize,
    pub items_per_domain: usize,
    /// Fraction of each domain's users shared with every other domain.
    pub overlap_fraction: f64,
    /// One per domain; empty means identity everywhere.
    #[serde(default)]
    pub transforms: Vec<AffineTransform>,
    pub noise_std: f64,
    /// Fraction of items each user interacts with.
    pub interaction_quantile: f64,
    #[serde(default = "default_max_condition")]
    pub max_condition_number: f64,
}

fn default_max_condition() -> f64 {
    1e3
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_domains: 2,
            latent_dim: 8,
            users_per_domain: 1000,
            items_per_domain: 500,
            overlap_fraction: 0.5,
            transforms: Vec::new(),
            noise_std: 0.0,
            interaction_quantile: 0.02,
            max_condition_number: default_max_condition(),
        }
    }
}

/// Ground-truth latents for one domain, rows aligned with the dataset's
/// original (unfiltered) id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainLatents {
    pub domain_id: String,
    pub user_ids: Vec<String>,
    pub user_latents: Vec<Vec<f64>>,
    pub item_ids: Vec<String>,
    pub item_latents: Vec<Vec<f64>>,
}

impl DomainLatents {
    pub fn user_latent(&self, id: &str) -> Option<&[f64]> {
        self.user_ids.iter().position(|u| u == id).map(|k| self.user_latents[k].as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub shared_user_ids: Vec<String>,
    pub domains: Vec<DomainLatents>,
}

pub fn domain_label(d: usize) -> String {
    ((b'a' + d as u8) as char).to_string()
}

/// 1-norm condition number via Gauss-Jordan inversion; `None` if singular.
fn condition_number(m: &[Vec<f64>]) -> Option<f64> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|r| (0..n).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for c in 0..n {
            a[col][c] /= p;
            inv[col][c] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for c in 0..n {
                    a[r][c] -= f * a[col][c];
                    inv[r][c] -= f * inv[col][c];
                }
            }
        }
    }
    let norm1 = |x: &[Vec<f64>]| (0..n).map(|c| x.iter().map(|row| row[c].abs()).sum::<f64>()).fold(0.0, f64::max);
    Some(norm1(m) * norm1(&inv))
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_domains < 2 {
            problems.push("num_domains must be at least 2".to_owned());
        }
        if self.latent_dim == 0 || self.users_per_domain == 0 || self.items_per_domain == 0 {
            problems.push("latent_dim, users_per_domain and items_per_domain must be positive".to_owned());
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            problems.push(format!("overlap_fraction {} not in (0, 1]", self.overlap_fraction));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            problems.push("noise_std must be finite and non-negative".to_owned());
        }
        if !(self.interaction_quantile > 0.0 && self.interaction_quantile <= 1.0) {
            problems.push(format!("interaction_quantile {} not in (0, 1]", self.interaction_quantile));
        }
        if !self.transforms.is_empty() && self.transforms.len() != self.num_domains {
            problems.push(format!(
                "{} transforms given for {} domains",
                self.transforms.len(),
                self.num_domains
            ));
        }
        for (d, t) in self.transforms.iter().enumerate() {
            let square = t.matrix.len() == self.latent_dim && t.matrix.iter().all(|r| r.len() == self.latent_dim);
            if !square || t.offset.len() != self.latent_dim {
                problems.push(format!("transform {d} has the wrong shape"));
                continue;
            }
            match condition_number(&t.matrix) {
                Some(c) if c <= self.max_condition_number => {}
                Some(c) => problems.push(format!("transform {d} condition number {c:.3e} exceeds bound")),
                None => problems.push(format!("transform {d} is singular")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn shared_users(&self) -> usize {
        (self.overlap_fraction * self.users_per_domain as f64).round() as usize
    }

    pub fn positives_per_user(&self) -> usize {
        ((self.interaction_quantile * self.items_per_domain as f64).round() as usize).max(1)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws every domain's dataset together with the latents that produced it.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<(Vec<InteractionDataset>, GroundTruth)> {
    cfg.validate()?;
    let dim = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_shared = cfg.shared_users();
    let shared: Vec<Vec<f64>> = (0..n_shared).map(|_| gaussian(&mut rng, dim)).collect();
    let shared_user_ids: Vec<String> = (0..n_shared).map(|u| format!("u{u:05}")).collect();
    let k = cfg.positives_per_user();
    let identity = AffineTransform::identity(dim);

    let mut datasets = Vec::with_capacity(cfg.num_domains);
    let mut domains = Vec::with_capacity(cfg.num_domains);
    for d in 0..cfg.num_domains {
        let label = domain_label(d);
        let transform = cfg.transforms.get(d).unwrap_or(&identity);

        let mut user_ids = shared_user_ids.clone();
        let mut base = shared.clone();
        for u in n_shared..cfg.users_per_domain {
            user_ids.push(format!("{label}_u{u:05}"));
            base.push(gaussian(&mut rng, dim));
        }
        let user_latents: Vec<Vec<f64>> = base
            .iter()
            .map(|z| {
                let mut r = transform.apply(z);
                if cfg.noise_std > 0.0 {
                    for x in &mut r {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *x += cfg.noise_std * e;
                    }
                }
                r
            })
            .collect();

        let item_ids: Vec<String> = (0..cfg.items_per_domain).map(|i| format!("{label}_i{i:05}")).collect();
        let item_latents: Vec<Vec<f64>> = (0..cfg.items_per_domain)
            .map(|_| {
                let v = gaussian(&mut rng, dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();

        let mut pairs = Vec::with_capacity(cfg.users_per_domain * k);
        for (u, r) in user_latents.iter().enumerate() {
            let mut scored: Vec<(f64, usize)> = item_latents
                .iter()
                .enumerate()
                .map(|(i, v)| (r.iter().zip(v).map(|(a, b)| a * b).sum(), i))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            pairs.extend(scored[..k].iter().map(|&(_, i)| (u as u32, i as u32)));
        }
        datasets.push(InteractionDataset::from_indexed(label.clone(), user_ids.clone(), item_ids.clone(), pairs)?);
        domains.push(DomainLatents { domain_id: label, user_ids, user_latents, item_ids, item_latents });
    }
    Ok((datasets, GroundTruth { shared_user_ids, domains }))
}
