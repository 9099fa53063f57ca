//! Latent-space diagnostics: distance to ground truth and a
//! diagonal-Gaussian KL between two sets of representations.

use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Mean Euclidean distance between paired rows.
pub fn avg_latent_distance(inferred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64> {
    if inferred.dim() != truth.dim() {
        return Err(Error::DimMismatch { expected: truth.nrows() * truth.ncols(), actual: inferred.nrows() * inferred.ncols() });
    }
    if inferred.nrows() == 0 {
        return Err(Error::EmptyCohort);
    }
    let diff = &inferred - &truth;
    let total: f64 = diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum();
    Ok(total / inferred.nrows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub kl_divergence: f64,
    /// Number of dimensions whose variance was raised to [`VARIANCE_FLOOR`].
    pub floored_dims: usize,
}

fn moments(m: &ArrayView2<f64>) -> (Array1<f64>, Array1<f64>, usize) {
    let mean = m.mean_axis(Axis(0)).unwrap();
    let mut floored = 0;
    let var = m.var_axis(Axis(0), 0.0).mapv(|v| {
        if v < VARIANCE_FLOOR {
            floored += 1;
            VARIANCE_FLOOR
        } else {
            v
        }
    });
    (mean, var, floored)
}

/// KL(P || Q) for diagonal Gaussians, summed over dimensions.
fn diag_kl(mp: &Array1<f64>, vp: &Array1<f64>, mq: &Array1<f64>, vq: &Array1<f64>) -> f64 {
    let mut kl = 0.0;
    for k in 0..mp.len() {
        let d = mp[k] - mq[k];
        kl += 0.5 * ((vq[k] / vp[k]).ln() + (vp[k] + d * d) / vq[k] - 1.0);
    }
    kl
}

/// Fits a diagonal Gaussian (population variance) to each row set and
/// returns the KL divergence averaged over both directions.
pub fn kl_disentanglement(specific: ArrayView2<f64>, shared: ArrayView2<f64>) -> Result<KlReport> {
    if specific.ncols() != shared.ncols() {
        return Err(Error::DimMismatch { expected: specific.ncols(), actual: shared.ncols() });
    }
    if specific.nrows() < 2 || shared.nrows() < 2 {
        return Err(Error::EmptyCohort);
    }
    let (ma, va, fa) = moments(&specific);
    let (mb, vb, fb) = moments(&shared);
    if fa + fb > 0 {
        log::warn!("kl_disentanglement: variance floor applied to {} dimension(s)", fa + fb);
    }
    let kl = 0.5 * (diag_kl(&ma, &va, &mb, &vb) + diag_kl(&mb, &vb, &ma, &va));
    Ok(KlReport { kl_divergence: kl.max(0.0), floored_dims: fa + fb })
}
