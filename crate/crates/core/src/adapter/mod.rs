//! Plug-in adapter between two frozen per-domain backbones.
//!
//! Each domain owns a prior, which maps its backbone user embedding into a
//! shared aligned space, and a decoder, which maps aligned vectors back into
//! the backbone space. A cold-start user known only in the source domain is
//! transferred as `decoder_tgt(prior_src(u_src))`. Two affine scale maps
//! take part in training only.

mod loss;
mod train;

pub use loss::{
    contrastive_loss, contrastive_loss_grad, cosine_similarity, reconstruction_loss, reconstruction_loss_grad,
    scale_alignment_loss, scale_alignment_loss_grad, total_loss, LossBreakdown, ScaleGrad,
};
pub use train::{fit_adapter, train_adapter, AdapterData, AdapterHyper, EpochLog, TrainedAdapter, Validator};

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{Activation, Affine, Mlp, ParamSet};
use crate::pretrain::EmbeddingTable;
use crate::util::sha256_hex;

const ADAPTER_MAGIC: &[u8; 4] = b"CDRA";

/// Which of the adapter's two domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    X,
    Y,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::X => Side::Y,
            Side::Y => Side::X,
        }
    }
}

/// Trainable state of an adapter plus its fixed hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub prior_x: Mlp,
    pub prior_y: Mlp,
    pub decoder_x: Mlp,
    pub decoder_y: Mlp,
    pub f1: Affine,
    pub f2: Affine,
    pub tau: f64,
    pub lambdas: [f64; 3],
    /// Apply the scale map between prior and decoder when transferring
    /// (F1 for X to Y, F2 for Y to X). Off by default.
    pub scale_at_inference: bool,
}

impl ParamSet for AdapterParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for m in [&self.prior_x, &self.prior_y, &self.decoder_x, &self.decoder_y] {
            out.extend(m.slices());
        }
        out.extend(self.f1.slices());
        out.extend(self.f2.slices());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for m in [&mut self.prior_x, &mut self.prior_y, &mut self.decoder_x, &mut self.decoder_y] {
            out.extend(m.slices_mut());
        }
        out.extend(self.f1.slices_mut());
        out.extend(self.f2.slices_mut());
        out
    }
}

/// Caches of one prior/decoder round trip.
struct RoundTrip {
    input: Array2<f64>,
    prior_cache: crate::nn::MlpCache,
    aligned: Array2<f64>,
    decoder_cache: crate::nn::MlpCache,
    output: Array2<f64>,
}

impl AdapterParams {
    /// Random priors/decoders of width `hidden`, identity scale maps.
    pub fn random<R: Rng>(
        dim: usize,
        hidden: usize,
        activation: Activation,
        tau: f64,
        lambdas: [f64; 3],
        diagonal_scale: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            prior_x: Mlp::random(dim, hidden, dim, activation, rng),
            prior_y: Mlp::random(dim, hidden, dim, activation, rng),
            decoder_x: Mlp::random(dim, hidden, dim, activation, rng),
            decoder_y: Mlp::random(dim, hidden, dim, activation, rng),
            f1: Affine::identity(dim, diagonal_scale),
            f2: Affine::identity(dim, diagonal_scale),
            tau,
            lambdas,
            scale_at_inference: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            prior_x: self.prior_x.zeros_like(),
            prior_y: self.prior_y.zeros_like(),
            decoder_x: self.decoder_x.zeros_like(),
            decoder_y: self.decoder_y.zeros_like(),
            f1: self.f1.zeros_like(),
            f2: self.f2.zeros_like(),
            tau: self.tau,
            lambdas: self.lambdas,
            scale_at_inference: self.scale_at_inference,
        }
    }

    pub fn dim(&self) -> usize {
        self.prior_x.input_dim()
    }

    pub fn prior(&self, side: Side) -> &Mlp {
        match side {
            Side::X => &self.prior_x,
            Side::Y => &self.prior_y,
        }
    }

    pub fn decoder(&self, side: Side) -> &Mlp {
        match side {
            Side::X => &self.decoder_x,
            Side::Y => &self.decoder_y,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for m in [&self.prior_x, &self.prior_y, &self.decoder_x, &self.decoder_y] {
            if m.input_dim() != d || m.output_dim() != d {
                return Err(Error::DimMismatch { expected: d, actual: m.output_dim() });
            }
        }
        if self.f1.dim() != d || self.f2.dim() != d {
            return Err(Error::DimMismatch { expected: d, actual: self.f1.dim() });
        }
        if !(self.tau > 0.0) || self.lambdas.iter().any(|&l| !(l >= 0.0)) || !self.all_finite() {
            return Err(Error::Format("adapter parameters out of range".into()));
        }
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len == self.dim() {
            Ok(())
        } else {
            Err(Error::DimMismatch { expected: self.dim(), actual: len })
        }
    }

    /// Aligned representation `u'` of a backbone vector from `side`.
    pub fn prior_forward(&self, side: Side, u: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u.len())?;
        let x = ArrayView2::from_shape((1, u.len()), u).unwrap();
        Ok(self.prior(side).forward(x).into_raw_vec_and_offset().0)
    }

    /// Backbone-space reconstruction of an aligned vector for `side`.
    pub fn decoder_forward(&self, side: Side, u_prime: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u_prime.len())?;
        let x = ArrayView2::from_shape((1, u_prime.len()), u_prime).unwrap();
        Ok(self.decoder(side).forward(x).into_raw_vec_and_offset().0)
    }

    /// `decoder_tgt(prior_src(u))`, with the source-to-target scale map in
    /// between when `scale_at_inference` is set.
    pub fn transfer_vector(&self, u: &[f64], src: Side, tgt: Side) -> Result<Vec<f64>> {
        if src == tgt {
            return Err(Error::InvalidConfig("transfer needs two different domains".into()));
        }
        let mut aligned = self.prior_forward(src, u)?;
        if self.scale_at_inference {
            let f = match src {
                Side::X => &self.f1,
                Side::Y => &self.f2,
            };
            let x = ArrayView2::from_shape((1, aligned.len()), &aligned).unwrap();
            aligned = f.forward(x).into_raw_vec_and_offset().0;
        }
        self.decoder_forward(tgt, &aligned)
    }

    fn round_trip(&self, side: Side, input: ArrayView2<f64>) -> RoundTrip {
        let (aligned, prior_cache) = self.prior(side).forward_cached(input);
        let (output, decoder_cache) = self.decoder(side).forward_cached(aligned.view());
        RoundTrip { input: input.to_owned(), prior_cache, aligned, decoder_cache, output }
    }

    /// Regularizer values and parameter gradients on one batch.
    ///
    /// `pairs_x[i]` and `pairs_y[i]` are the backbone embeddings of the same
    /// overlapping user; `recon_x` and `recon_y` are any users of each domain
    /// used for the reconstruction term.
    pub fn objective(
        &self,
        pairs_x: ArrayView2<f64>,
        pairs_y: ArrayView2<f64>,
        recon_x: ArrayView2<f64>,
        recon_y: ArrayView2<f64>,
    ) -> Result<(LossBreakdown, AdapterParams)> {
        let [lam1, lam2, lam3] = self.lambdas;
        let mut grad = self.zeros_like();

        let (p, p_cache) = self.prior_x.forward_cached(pairs_x);
        let (q, q_cache) = self.prior_y.forward_cached(pairs_y);
        let (l1, d_p1, d_q1) = contrastive_loss_grad(p.view(), q.view(), self.tau)?;
        let (l2, sg) = scale_alignment_loss_grad(p.view(), q.view(), &self.f1, &self.f2)?;
        let d_p = d_p1 * lam1 + sg.d_p * lam2;
        let d_q = d_q1 * lam1 + sg.d_q * lam2;
        self.prior_x.backward(&p_cache, &d_p, &mut grad.prior_x);
        self.prior_y.backward(&q_cache, &d_q, &mut grad.prior_y);
        grad.f1 = sg.f1;
        grad.f2 = sg.f2;
        for f in [&mut grad.f1, &mut grad.f2] {
            f.alpha *= lam2;
            f.beta *= lam2;
        }

        let rx = self.round_trip(Side::X, recon_x);
        let ry = self.round_trip(Side::Y, recon_y);
        let (l3, d_xh, d_yh) =
            reconstruction_loss_grad(rx.input.view(), rx.output.view(), ry.input.view(), ry.output.view())?;
        for (side, rt, d_out) in [(Side::X, &rx, d_xh), (Side::Y, &ry, d_yh)] {
            let d_out = d_out * lam3;
            let (dec_grad, prior_grad) = match side {
                Side::X => (&mut grad.decoder_x, &mut grad.prior_x),
                Side::Y => (&mut grad.decoder_y, &mut grad.prior_y),
            };
            let d_aligned = self.decoder(side).backward(&rt.decoder_cache, &d_out, dec_grad);
            debug_assert_eq!(d_aligned.dim(), rt.aligned.dim());
            self.prior(side).backward(&rt.prior_cache, &d_aligned, prior_grad);
        }

        Ok((total_loss(l1, l2, l3, self.lambdas), grad))
    }

    /// Objective value only.
    pub fn loss(
        &self,
        pairs_x: ArrayView2<f64>,
        pairs_y: ArrayView2<f64>,
        recon_x: ArrayView2<f64>,
        recon_y: ArrayView2<f64>,
    ) -> Result<LossBreakdown> {
        let p = self.prior_x.forward(pairs_x);
        let q = self.prior_y.forward(pairs_y);
        let l1 = contrastive_loss(p.view(), q.view(), self.tau)?;
        let l2 = scale_alignment_loss(p.view(), q.view(), &self.f1, &self.f2)?;
        let x_hat = self.decoder_x.forward(self.prior_x.forward(recon_x).view());
        let y_hat = self.decoder_y.forward(self.prior_y.forward(recon_y).view());
        let l3 = reconstruction_loss(recon_x, x_hat.view(), recon_y, y_hat.view())?;
        Ok(total_loss(l1, l2, l3, self.lambdas))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(ADAPTER_MAGIC);
        w.u64(self.dim() as u64)
            .u64(self.prior_x.hidden_dim() as u64)
            .u32(self.prior_x.activation.code())
            .u8(self.f1.diagonal as u8)
            .u8(self.scale_at_inference as u8)
            .f64(self.tau)
            .f64s(&self.lambdas);
        for m in [&self.prior_x, &self.prior_y, &self.decoder_x, &self.decoder_y] {
            for s in m.slices() {
                w.f64s(s);
            }
        }
        for f in [&self.f1, &self.f2] {
            for s in f.slices() {
                w.f64s(s);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, ADAPTER_MAGIC)?;
        let dim = r.usize()?;
        let hidden = r.usize()?;
        let activation = Activation::from_code(r.u32()?).ok_or_else(|| Error::Format("unknown activation".into()))?;
        let diagonal = r.u8()? != 0;
        let scale_at_inference = r.u8()? != 0;
        let tau = r.f64()?;
        let lambdas: [f64; 3] = r.f64s(3)?.try_into().unwrap();
        let mut params = AdapterParams {
            prior_x: Mlp::zeros(dim, hidden, dim, activation),
            prior_y: Mlp::zeros(dim, hidden, dim, activation),
            decoder_x: Mlp::zeros(dim, hidden, dim, activation),
            decoder_y: Mlp::zeros(dim, hidden, dim, activation),
            f1: Affine::identity(dim, diagonal),
            f2: Affine::identity(dim, diagonal),
            tau,
            lambdas,
            scale_at_inference,
        };
        for s in params.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&r.f64s(n)?);
        }
        r.finish()?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Transfers a source-domain user to the target domain.
pub fn transfer(
    params: &AdapterParams,
    source_table: &EmbeddingTable,
    user: usize,
    src: Side,
    tgt: Side,
) -> Result<Vec<f64>> {
    let u = source_table
        .user_f64(user)
        .map_err(|_| Error::UnknownUser(format!("{user} in `{}`", source_table.domain_id())))?;
    params.transfer_vector(&u, src, tgt)
}

/// One hop of a cascade: an adapter and the direction to apply it in.
#[derive(Clone, Copy, Debug)]
pub struct Hop<'a> {
    pub params: &'a AdapterParams,
    pub from: Side,
    pub to: Side,
}

/// Chains transfers: the reconstruction produced by each hop is the
/// backbone-space input of the next (e.g. A to B with an A-B adapter, then
/// B to C with a B-C adapter).
pub fn cascade(hops: &[Hop<'_>], u: &[f64]) -> Result<Vec<f64>> {
    let mut current = u.to_vec();
    for hop in hops {
        if hop.params.dim() != current.len() {
            return Err(Error::DimMismatch { expected: hop.params.dim(), actual: current.len() });
        }
        current = hop.params.transfer_vector(&current, hop.from, hop.to)?;
    }
    Ok(current)
}

/// Row-wise prior outputs for a batch of backbone vectors.
pub fn prior_batch(params: &AdapterParams, side: Side, u: ArrayView2<f64>) -> Array2<f64> {
    params.prior(side).forward(u)
}

/// Adapter whose priors and decoders are all the identity map.
pub fn identity_adapter(dim: usize) -> AdapterParams {
    let mut mlp = Mlp::zeros(dim, dim, dim, Activation::Identity);
    mlp.w1 = Array2::eye(dim);
    mlp.w2 = Array2::eye(dim);
    mlp.b1 = Array1::zeros(dim);
    AdapterParams {
        prior_x: mlp.clone(),
        prior_y: mlp.clone(),
        decoder_x: mlp.clone(),
        decoder_y: mlp,
        f1: Affine::identity(dim, false),
        f2: Affine::identity(dim, false),
        tau: 0.2,
        lambdas: [1.0; 3],
        scale_at_inference: false,
    }
}
