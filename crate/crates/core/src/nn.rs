//! Dense layers with hand-written backward passes and an Adam optimizer.
//!
//! Inputs are row-major batches: one sample per row.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Nonlinearity between the two layers of an [`Mlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Identity,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Softplus => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Softplus),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            // log(1 + e^x) without overflow
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => 1.0,
        }
    }
}

/// Anything whose parameters can be visited as flat slices in a fixed order.
pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn copy_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
    }
}

/// Two dense layers: `act(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

/// Intermediate values needed by [`Mlp::backward`].
pub struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        Self {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, output)),
            b2: Array1::zeros(output),
            activation,
        }
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn random<R: Rng>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let mut m = Self::zeros(input, hidden, output, activation);
        let n1 = Normal::new(0.0, (1.0 / input as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        m.w1.mapv_inplace(|_| n1.sample(rng));
        m.w2.mapv_inplace(|_| n2.sample(rng));
        m
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.output_dim(), self.activation)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = x.dot(&self.w1) + &self.b1;
        let act = self.activation;
        let hidden = pre.mapv(|v| act.apply(v));
        let out = hidden.dot(&self.w2) + &self.b2;
        (out, MlpCache { input: x.to_owned(), pre, hidden })
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input batch.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        grad.w2 += &cache.hidden.t().dot(d_out);
        grad.b2 += &d_out.sum_axis(Axis(0));
        let act = self.activation;
        let mut d_pre = d_out.dot(&self.w2.t());
        d_pre.zip_mut_with(&cache.pre, |d, &p| *d *= act.derivative(p));
        grad.w1 += &cache.input.t().dot(&d_pre);
        grad.b1 += &d_pre.sum_axis(Axis(0));
        d_pre.dot(&self.w1.t())
    }
}

impl ParamSet for Mlp {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
}

/// Activation-free map `x -> alpha x + beta`, optionally restricted to a
/// diagonal `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub alpha: Array2<f64>,
    pub beta: Array1<f64>,
    pub diagonal: bool,
}

impl Affine {
    pub fn identity(dim: usize, diagonal: bool) -> Self {
        Self { alpha: Array2::eye(dim), beta: Array1::zeros(dim), diagonal }
    }

    pub fn zeros_like(&self) -> Self {
        Self { alpha: Array2::zeros(self.alpha.raw_dim()), beta: Array1::zeros(self.beta.len()), diagonal: self.diagonal }
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.alpha.t()) + &self.beta
    }

    /// Accumulates gradients for `y = forward(x)`; returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, d_out: &Array2<f64>, grad: &mut Affine) -> Array2<f64> {
        let mut d_alpha = d_out.t().dot(&x);
        if self.diagonal {
            for ((r, c), v) in d_alpha.indexed_iter_mut() {
                if r != c {
                    *v = 0.0;
                }
            }
        }
        grad.alpha += &d_alpha;
        grad.beta += &d_out.sum_axis(Axis(0));
        d_out.dot(&self.alpha)
    }
}

impl ParamSet for Affine {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.alpha.as_slice().unwrap(), self.beta.as_slice().unwrap()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.alpha.as_slice_mut().unwrap(), self.beta.as_slice_mut().unwrap()]
    }
}

/// Adam over a fixed-order flat view of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let mut k = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
            for (x, &gx) in p.iter_mut().zip(g) {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gx;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gx * gx;
                *x -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softplus_is_stable_and_smooth() {
        assert!((Activation::Softplus.apply(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(Activation::Softplus.apply(1000.0), 1000.0);
        assert!(Activation::Softplus.apply(-1000.0) >= 0.0);
        assert!((Activation::Softplus.derivative(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_mlp_passes_input_through() {
        let mut m = Mlp::zeros(3, 3, 3, Activation::Identity);
        m.w1 = Array2::eye(3);
        m.w2 = Array2::eye(3);
        let x = array![[1.0, -2.0, 0.5]];
        assert_eq!(m.forward(x.view()), x);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Mlp::random(3, 5, 2, Activation::Softplus, &mut rng);
        let x = array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.2]];
        let weights = array![[0.5, -1.0], [2.0, 0.25]];
        let loss = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()) * &weights).sum();

        let (_, cache) = m.forward_cached(x.view());
        let mut grad = m.zeros_like();
        let dx = m.backward(&cache, &weights, &mut grad);

        let h = 1e-6;
        let flat = m.to_flat();
        for (k, g) in grad.to_flat().iter().enumerate() {
            let mut p = m.clone();
            let mut f = flat.clone();
            f[k] += h;
            p.copy_from_flat(&f);
            let up = loss(&p, &x);
            f[k] -= 2.0 * h;
            p.copy_from_flat(&f);
            let down = loss(&p, &x);
            assert!((g - (up - down) / (2.0 * h)).abs() < 1e-6);
        }
        for ((r, c), g) in dx.indexed_iter() {
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let up = loss(&m, &xp);
            xp[[r, c]] -= 2.0 * h;
            assert!((g - (up - loss(&m, &xp)) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn diagonal_affine_keeps_off_diagonal_zero() {
        let mut f = Affine::identity(2, true);
        let x = array![[1.0, 2.0]];
        let mut g = f.zeros_like();
        f.backward(x.view(), &array![[1.0, 1.0]], &mut g);
        assert_eq!(g.alpha[[0, 1]], 0.0);
        assert_eq!(g.alpha[[1, 1]], 2.0);
        let mut opt = Adam::new(0.1, f.num_params());
        opt.step(&mut f, &g);
        assert_eq!(f.alpha[[1, 0]], 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut f = Affine::identity(1, false);
        let mut opt = Adam::new(0.05, f.num_params());
        for _ in 0..2000 {
            // loss = (alpha - 3)^2 + (beta + 1)^2
            let mut g = f.zeros_like();
            g.alpha[[0, 0]] = 2.0 * (f.alpha[[0, 0]] - 3.0);
            g.beta[0] = 2.0 * (f.beta[0] + 1.0);
            opt.step(&mut f, &g);
        }
        assert!((f.alpha[[0, 0]] - 3.0).abs() < 1e-3);
        assert!((f.beta[0] + 1.0).abs() < 1e-3);
    }
}
