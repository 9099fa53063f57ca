//! Independent oracles shared by the integration tests and the acceptance
//! target.

#![allow(dead_code)]

use cdr_core::adapter::{
    contrastive_loss, contrastive_loss_grad, reconstruction_loss, reconstruction_loss_grad, scale_alignment_loss,
    scale_alignment_loss_grad, AdapterParams,
};
use cdr_core::baseline::mapping_loss_grad;
use cdr_core::eval::{hr_at_k, mrr, ndcg_at_k, positive_rank, rank_candidates};
use cdr_core::nn::{Activation, Affine, Mlp, ParamSet};
use cdr_core::pretrain::{bpr_triple_loss_and_grad, EmbeddingTable};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_DIM: usize = 4;
pub const GRAD_ROWS: usize = 3;
pub const GRAD_INSTANCES: usize = 5;
const FD_STEP: f64 = 1e-5;

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Mlp with every weight and bias drawn from N(0, 0.5^2).
pub fn random_mlp(d: usize, h: usize, rng: &mut ChaCha8Rng) -> Mlp {
    let mut m = Mlp::zeros(d, h, d, Activation::Softplus);
    let flat: Vec<f64> = gaussian_vec(m.num_params(), rng).into_iter().map(|v| 0.5 * v).collect();
    m.copy_from_flat(&flat);
    m
}

pub fn random_affine(d: usize, rng: &mut ChaCha8Rng) -> Affine {
    let mut f = Affine::identity(d, false);
    f.alpha = Array2::eye(d) + gaussian(d, d, rng) * 0.3;
    f.beta = Array1::from(gaussian_vec(d, rng)) * 0.3;
    f
}

pub fn random_adapter(d: usize, rng: &mut ChaCha8Rng, lambdas: [f64; 3]) -> AdapterParams {
    let mut p = AdapterParams::random(d, 2 * d, Activation::Softplus, 0.5, lambdas, false, rng);
    p.prior_x = random_mlp(d, 2 * d, rng);
    p.prior_y = random_mlp(d, 2 * d, rng);
    p.decoder_x = random_mlp(d, 2 * d, rng);
    p.decoder_y = random_mlp(d, 2 * d, rng);
    p.f1 = random_affine(d, rng);
    p.f2 = random_affine(d, rng);
    p
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = scale(analytic).max(scale(numeric));
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + FD_STEP;
            let up = f(&v);
            v[i] = orig - FD_STEP;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn matrix(flat: &[f64], rows: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, flat.len() / rows), flat.to_vec()).unwrap()
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn with_flat<P: ParamSet + Clone>(p: &P, v: &[f64]) -> P {
    let mut q = p.clone();
    q.copy_from_flat(v);
    q
}

/// Worst relative error over the instances of one gradient family.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn family(name: &'static str, seed: u64, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> GradResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..GRAD_INSTANCES).map(|_| one(&mut rng)).fold(0.0, f64::max);
    GradResult { name, instances: GRAD_INSTANCES, worst }
}

pub fn grad_bpr(seed: u64) -> GradResult {
    family("bpr", seed, |rng| {
        let reg = 0.1;
        let (u, p, n) = (gaussian_vec(GRAD_DIM, rng), gaussian_vec(GRAD_DIM, rng), gaussian_vec(GRAD_DIM, rng));
        let (_, du, dp, dn) = bpr_triple_loss_and_grad(&u, &p, &n, reg);
        let all: Vec<f64> = [u.clone(), p.clone(), n.clone()].concat();
        let num = numeric_grad(&all, |v| {
            bpr_triple_loss_and_grad(&v[..GRAD_DIM], &v[GRAD_DIM..2 * GRAD_DIM], &v[2 * GRAD_DIM..], reg).0
        });
        rel_error(&[du, dp, dn].concat(), &num)
    })
}

pub fn grad_l1_inputs(seed: u64) -> GradResult {
    family("l1 (inputs)", seed, |rng| {
        let tau = 0.2 + rng.gen::<f64>();
        let (p, q) = (gaussian(GRAD_ROWS, GRAD_DIM, rng), gaussian(GRAD_ROWS, GRAD_DIM, rng));
        let (_, dp, dq) = contrastive_loss_grad(p.view(), q.view(), tau).unwrap();
        let all = [flat(&p), flat(&q)].concat();
        let half = p.len();
        let num = numeric_grad(&all, |v| {
            contrastive_loss(matrix(&v[..half], GRAD_ROWS).view(), matrix(&v[half..], GRAD_ROWS).view(), tau).unwrap()
        });
        rel_error(&[flat(&dp), flat(&dq)].concat(), &num)
    })
}

pub fn grad_l2_inputs(seed: u64) -> GradResult {
    family("l2 (inputs and scale maps)", seed, |rng| {
        let (p, q) = (gaussian(GRAD_ROWS, GRAD_DIM, rng), gaussian(GRAD_ROWS, GRAD_DIM, rng));
        let (f1, f2) = (random_affine(GRAD_DIM, rng), random_affine(GRAD_DIM, rng));
        let (_, g) = scale_alignment_loss_grad(p.view(), q.view(), &f1, &f2).unwrap();
        let np = p.len();
        let nf = f1.num_params();
        let all = [flat(&p), flat(&q), f1.to_flat(), f2.to_flat()].concat();
        let num = numeric_grad(&all, |v| {
            let (f1, f2) = (with_flat(&f1, &v[2 * np..2 * np + nf]), with_flat(&f2, &v[2 * np + nf..]));
            scale_alignment_loss(matrix(&v[..np], GRAD_ROWS).view(), matrix(&v[np..2 * np], GRAD_ROWS).view(), &f1, &f2)
                .unwrap()
        });
        rel_error(&[flat(&g.d_p), flat(&g.d_q), g.f1.to_flat(), g.f2.to_flat()].concat(), &num)
    })
}

pub fn grad_l3_inputs(seed: u64) -> GradResult {
    family("l3 (reconstructions)", seed, |rng| {
        let (ux, uy) = (gaussian(GRAD_ROWS, GRAD_DIM, rng), gaussian(GRAD_ROWS + 1, GRAD_DIM, rng));
        let (xh, yh) = (gaussian(GRAD_ROWS, GRAD_DIM, rng), gaussian(GRAD_ROWS + 1, GRAD_DIM, rng));
        let (_, gx, gy) = reconstruction_loss_grad(ux.view(), xh.view(), uy.view(), yh.view()).unwrap();
        let nx = xh.len();
        let all = [flat(&xh), flat(&yh)].concat();
        let num = numeric_grad(&all, |v| {
            reconstruction_loss(ux.view(), matrix(&v[..nx], GRAD_ROWS).view(), uy.view(), matrix(&v[nx..], GRAD_ROWS + 1).view())
                .unwrap()
        });
        rel_error(&[flat(&gx), flat(&gy)].concat(), &num)
    })
}

/// Gradient of the adapter objective with respect to every parameter.
pub fn grad_adapter(name: &'static str, seed: u64, lambdas: impl Fn(&mut ChaCha8Rng) -> [f64; 3]) -> GradResult {
    family(name, seed, |rng| {
        let lam = lambdas(rng);
        let p = random_adapter(GRAD_DIM, rng, lam);
        let (px, py) = (gaussian(GRAD_ROWS, GRAD_DIM, rng), gaussian(GRAD_ROWS, GRAD_DIM, rng));
        let (rx, ry) = (gaussian(GRAD_ROWS, GRAD_DIM, rng), gaussian(GRAD_ROWS + 1, GRAD_DIM, rng));
        let (_, grad) = p.objective(px.view(), py.view(), rx.view(), ry.view()).unwrap();
        let num = numeric_grad(&p.to_flat(), |v| {
            with_flat(&p, v).loss(px.view(), py.view(), rx.view(), ry.view()).unwrap().total
        });
        rel_error(&grad.to_flat(), &num)
    })
}

pub fn grad_emcdr(seed: u64) -> GradResult {
    family("emcdr mapping", seed, |rng| {
        let map = random_mlp(GRAD_DIM, 2 * GRAD_DIM, rng);
        let (s, t) = (gaussian(GRAD_ROWS, GRAD_DIM, rng), gaussian(GRAD_ROWS, GRAD_DIM, rng));
        let (_, g) = mapping_loss_grad(&map, s.view(), t.view()).unwrap();
        let num = numeric_grad(&map.to_flat(), |v| {
            cdr_core::baseline::mapping_loss(&with_flat(&map, v), s.view(), t.view()).unwrap()
        });
        rel_error(&g.to_flat(), &num)
    })
}

/// Every gradient family the implementation relies on.
pub fn gradient_suite() -> Vec<GradResult> {
    vec![
        grad_bpr(11),
        grad_l1_inputs(12),
        grad_l2_inputs(13),
        grad_l3_inputs(14),
        grad_adapter("l1 (adapter params)", 15, |_| [1.0, 0.0, 0.0]),
        grad_adapter("l2 (adapter params)", 16, |_| [0.0, 1.0, 0.0]),
        grad_adapter("l3 (adapter params)", 17, |_| [0.0, 0.0, 1.0]),
        grad_adapter("total (adapter params)", 18, |rng| [rng.gen(), rng.gen(), rng.gen()]),
        grad_emcdr(19),
    ]
}

/// Naive reference: sort every candidate by (score desc, index asc) and
/// read off the positive's position.
pub fn naive_rank(scores: &[(usize, f64)], positive: usize) -> usize {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    v.iter().position(|&(i, _)| i == positive).unwrap() + 1
}

pub struct MetricOracleOutcome {
    pub instances: usize,
    pub mismatches: usize,
}

/// Random small instances with integer embeddings, so ties are common.
pub fn metric_oracle(instances: usize, seed: u64) -> MetricOracleOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let dim = rng.gen_range(1..=3);
        let num_items = rng.gen_range(2..=16);
        let items = Array2::from_shape_simple_fn((num_items, dim), || rng.gen_range(-2..=2) as f32);
        let table = EmbeddingTable::new("t", Array2::zeros((1, dim)), items.clone()).unwrap();
        let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2..=2) as f64).collect();
        let mut pool: Vec<usize> = (0..num_items).collect();
        rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), &mut rng);
        let n = rng.gen_range(2..=num_items.min(12));
        let candidates = &pool[..n];
        let positive = candidates[0];
        let negatives = &candidates[1..];
        let scores: Vec<(usize, f64)> = candidates
            .iter()
            .map(|&i| (i, items.row(i).iter().zip(&u).map(|(&a, &b)| a as f64 * b).sum()))
            .collect();
        let expected = naive_rank(&scores, positive);
        let k = rng.gen_range(1..=12);

        let rank = positive_rank(&u, &table, positive, negatives).unwrap();
        let ranked = rank_candidates(&u, &table, candidates, n).unwrap();
        let sorted_rank = ranked.iter().position(|&i| i == positive).unwrap() + 1;
        let hr = if expected <= k { 1.0 } else { 0.0 };
        let ndcg = if expected <= k { 1.0 / ((expected + 1) as f64).log2() } else { 0.0 };
        let ok = rank == expected
            && sorted_rank == expected
            && hr_at_k(rank, k).unwrap() == hr
            && ndcg_at_k(rank, k).unwrap() == ndcg
            && mrr(rank).unwrap() == 1.0 / expected as f64;
        if !ok {
            mismatches += 1;
        }
    }
    MetricOracleOutcome { instances, mismatches }
}

/// Named identity checks on the losses; each returns the observed deviation.
pub fn loss_identities(seed: u64) -> Vec<(&'static str, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    let mut out = Vec::new();

    // identity round trip
    let id = cdr_core::adapter::identity_adapter(d);
    let (ux, uy) = (gaussian(10, d, &mut rng), gaussian(7, d, &mut rng));
    let xh = id.decoder_x.forward(id.prior_x.forward(ux.view()).view());
    let yh = id.decoder_y.forward(id.prior_y.forward(uy.view()).view());
    out.push(("l3 = 0 at identity round trip", reconstruction_loss(ux.view(), xh.view(), uy.view(), yh.view()).unwrap(), 0.0));

    // F1(x) = 2x, F2(y) = y / 2, q = 2p
    let mut f1 = Affine::identity(d, false);
    f1.alpha *= 2.0;
    let mut f2 = Affine::identity(d, false);
    f2.alpha *= 0.5;
    let p = gaussian(9, d, &mut rng);
    let q = &p * 2.0;
    out.push(("l2 = 0 at exact inverse affine pair", scale_alignment_loss(p.view(), q.view(), &f1, &f2).unwrap(), 0.0));

    // positive row rescaling
    let (p, q) = (gaussian(8, d, &mut rng), gaussian(8, d, &mut rng));
    let base = contrastive_loss(p.view(), q.view(), 0.2).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut ps = p.clone();
        let mut qs = q.clone();
        let (i, j) = (rng.gen_range(0..8), rng.gen_range(0..8));
        let (ci, cj) = (rng.gen_range(0.01..100.0), rng.gen_range(0.01..100.0));
        ps.row_mut(i).mapv_inplace(|v| v * ci);
        qs.row_mut(j).mapv_inplace(|v| v * cj);
        worst = worst.max((contrastive_loss(ps.view(), qs.view(), 0.2).unwrap() - base).abs());
    }
    out.push(("l1 invariant to positive row rescaling", worst, 1e-10));

    // linearity of the weighted objective in each lambda
    let mut worst: f64 = 0.0;
    let params = random_adapter(d, &mut rng, [1.0, 1.0, 1.0]);
    let (px, py) = (gaussian(8, d, &mut rng), gaussian(8, d, &mut rng));
    for k in 0..3 {
        let at = |t: f64| {
            let mut p = params.clone();
            p.lambdas[k] = t;
            p.loss(px.view(), py.view(), ux.view(), uy.view()).unwrap()
        };
        let (a, b, c) = (at(0.0), at(1.0), at(2.5));
        let comp = [a.l1, a.l2, a.l3][k];
        worst = worst.max((b.total - a.total - comp).abs());
        worst = worst.max((c.total - a.total - 2.5 * comp).abs());
    }
    out.push(("total linear in each lambda", worst, 1e-10));
    out
}
