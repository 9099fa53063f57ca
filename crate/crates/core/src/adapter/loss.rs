//! The three alignment regularizers and their analytic gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Affine;

/// Weighted regularizer values of one batch or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

/// `lambda1 l1 + lambda2 l2 + lambda3 l3`.
pub fn total_loss(l1: f64, l2: f64, l3: f64, lambdas: [f64; 3]) -> LossBreakdown {
    LossBreakdown { l1, l2, l3, total: lambdas[0] * l1 + lambdas[1] * l2 + lambdas[2] * l3 }
}

pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { expected: a.len(), actual: b.len() });
    }
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_pair(p: &ArrayView2<f64>, q: &ArrayView2<f64>) -> Result<()> {
    if p.ncols() != q.ncols() {
        return Err(Error::DimMismatch { expected: p.ncols(), actual: q.ncols() });
    }
    if p.nrows() != q.nrows() {
        return Err(Error::DimMismatch { expected: p.nrows(), actual: q.nrows() });
    }
    Ok(())
}

fn normalize_rows(m: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::UndefinedSimilarity);
    }
    let unit = m / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Backprop through `unit = x / |x|` for every row.
fn normalize_rows_backward(unit: &Array2<f64>, norms: &Array1<f64>, d_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = d_unit.clone();
    Zip::from(out.rows_mut())
        .and(unit.rows())
        .and(norms)
        .for_each(|mut d, u, &n| {
            let proj = d.dot(&u);
            d.zip_mut_with(&u, |dv, &uv| *dv = (*dv - uv * proj) / n);
        });
    out
}

/// Row-wise log-softmax pieces: returns (softmax, logsumexp per row).
fn softmax_rows(s: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut probs = s.clone();
    let mut lse = Array1::zeros(s.nrows());
    for (mut row, l) in probs.rows_mut().into_iter().zip(lse.iter_mut()) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        *l = max + sum.ln();
    }
    (probs, lse)
}

/// Symmetric in-batch InfoNCE over cosine similarities, with gradients for
/// both inputs. Row `i` of `p` and `q` belong to the same user; every other
/// row of the batch acts as a negative.
pub fn contrastive_loss_grad(
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair(&p, &q)?;
    let n = p.nrows();
    if n < 2 {
        return Err(Error::TrainingInfeasible("contrastive loss needs at least two rows".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature {tau} must be positive")));
    }
    let (pu, pn) = normalize_rows(&p)?;
    let (qu, qn) = normalize_rows(&q)?;
    let s = pu.dot(&qu.t()) / tau;

    let (row_prob, row_lse) = softmax_rows(&s);
    let st = s.t().to_owned();
    let (col_prob_t, col_lse) = softmax_rows(&st);
    let diag = s.diag();
    let forward = (&row_lse - &diag).sum() / n as f64;
    let backward = (&col_lse - &diag).sum() / n as f64;
    let loss = 0.5 * (forward + backward);

    let eye = Array2::<f64>::eye(n);
    let ds = ((&row_prob - &eye) + (&col_prob_t.t() - &eye)) / (2.0 * n as f64);
    let d_pu = ds.dot(&qu) / tau;
    let d_qu = ds.t().dot(&pu) / tau;
    Ok((loss, normalize_rows_backward(&pu, &pn, &d_pu), normalize_rows_backward(&qu, &qn, &d_qu)))
}

pub fn contrastive_loss(p: ArrayView2<f64>, q: ArrayView2<f64>, tau: f64) -> Result<f64> {
    contrastive_loss_grad(p, q, tau).map(|(l, _, _)| l)
}

/// Mean row norm of `residual` and its gradient. Rows with a zero residual
/// get a zero subgradient.
fn mean_row_norm_grad(residual: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = residual.nrows().max(1) as f64;
    let mut grad = residual.clone();
    let mut total = 0.0;
    for mut row in grad.rows_mut() {
        let norm = row.dot(&row).sqrt();
        total += norm;
        if norm > 0.0 {
            row /= norm * n;
        }
    }
    (total / n, grad)
}

/// Gradients of the scale-alignment regularizer.
pub struct ScaleGrad {
    pub d_p: Array2<f64>,
    pub d_q: Array2<f64>,
    pub f1: Affine,
    pub f2: Affine,
}

/// `mean_i |F1(p_i) - q_i| + |F2(q_i) - p_i|` with gradients.
pub fn scale_alignment_loss_grad(
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    f1: &Affine,
    f2: &Affine,
) -> Result<(f64, ScaleGrad)> {
    check_pair(&p, &q)?;
    for f in [f1, f2] {
        if f.dim() != p.ncols() {
            return Err(Error::DimMismatch { expected: p.ncols(), actual: f.dim() });
        }
    }
    let (l_a, d_ra) = mean_row_norm_grad(&(f1.forward(p) - q));
    let (l_b, d_rb) = mean_row_norm_grad(&(f2.forward(q) - p));
    let mut g1 = f1.zeros_like();
    let mut g2 = f2.zeros_like();
    let d_p = f1.backward(p, &d_ra, &mut g1) - &d_rb;
    let d_q = f2.backward(q, &d_rb, &mut g2) - &d_ra;
    Ok((l_a + l_b, ScaleGrad { d_p, d_q, f1: g1, f2: g2 }))
}

pub fn scale_alignment_loss(p: ArrayView2<f64>, q: ArrayView2<f64>, f1: &Affine, f2: &Affine) -> Result<f64> {
    scale_alignment_loss_grad(p, q, f1, f2).map(|(l, _)| l)
}

/// `mean |u_x - u_x_hat| + mean |u_y - u_y_hat|` with gradients for the two
/// reconstructions. The two domains may contribute different row counts.
pub fn reconstruction_loss_grad(
    u_x: ArrayView2<f64>,
    u_x_hat: ArrayView2<f64>,
    u_y: ArrayView2<f64>,
    u_y_hat: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair(&u_x, &u_x_hat)?;
    check_pair(&u_y, &u_y_hat)?;
    let (lx, gx) = mean_row_norm_grad(&(&u_x_hat - &u_x));
    let (ly, gy) = mean_row_norm_grad(&(&u_y_hat - &u_y));
    Ok((lx + ly, gx, gy))
}

pub fn reconstruction_loss(
    u_x: ArrayView2<f64>,
    u_x_hat: ArrayView2<f64>,
    u_y: ArrayView2<f64>,
    u_y_hat: ArrayView2<f64>,
) -> Result<f64> {
    reconstruction_loss_grad(u_x, u_x_hat, u_y, u_y_hat).map(|(l, _, _)| l)
}
