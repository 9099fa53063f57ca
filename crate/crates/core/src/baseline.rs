//! Mapping baseline: an MLP regressed from source-domain to target-domain
//! embeddings of overlapping users, one model per direction.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{steps_per_epoch, PairCycle};
use crate::container::{Reader, Writer};
use crate::dataset::{CdrSplit, Direction};
use crate::error::{Error, Result};
use crate::eval::evaluate_records;
use crate::nn::{Activation, Adam, Mlp, ParamSet};
use crate::pretrain::EmbeddingTable;
use crate::util::sha256_hex;

const MAPPING_MAGIC: &[u8; 4] = b"CDRM";

#[derive(Clone, Debug, PartialEq)]
pub struct MappingParams {
    pub map: Mlp,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingHyper {
    /// Hidden width; twice the embedding dim if unset.
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_k: usize,
    /// Set from the experiment seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for MappingHyper {
    fn default() -> Self {
        Self {
            hidden: None,
            activation: Activation::Softplus,
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            eval_k: 10,
            seed: 0,
        }
    }
}

impl MappingHyper {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("baseline batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("baseline learning_rate must be positive");
        }
        if self.max_epochs == 0 || self.eval_k == 0 || self.hidden == Some(0) {
            problems.push("baseline max_epochs, eval_k and hidden must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedMapping {
    pub params: MappingParams,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
    pub best_epoch: usize,
}

/// `mean_i |map(src_i) - tgt_i|^2` and its parameter gradient.
pub fn mapping_loss_grad(map: &Mlp, src: ArrayView2<f64>, tgt: ArrayView2<f64>) -> Result<(f64, Mlp)> {
    if src.dim() != tgt.dim() {
        return Err(Error::DimMismatch { expected: tgt.nrows(), actual: src.nrows() });
    }
    if src.ncols() != map.input_dim() {
        return Err(Error::DimMismatch { expected: map.input_dim(), actual: src.ncols() });
    }
    let n = src.nrows().max(1) as f64;
    let (out, cache) = map.forward_cached(src);
    let resid = out - tgt;
    let loss = resid.iter().map(|v| v * v).sum::<f64>() / n;
    let mut grad = map.zeros_like();
    map.backward(&cache, &(resid * (2.0 / n)), &mut grad);
    Ok((loss, grad))
}

pub fn mapping_loss(map: &Mlp, src: ArrayView2<f64>, tgt: ArrayView2<f64>) -> Result<f64> {
    mapping_loss_grad(map, src, tgt).map(|(l, _)| l)
}

fn source_target<'a>(
    tables: (&'a EmbeddingTable, &'a EmbeddingTable),
    direction: Direction,
) -> (&'a EmbeddingTable, &'a EmbeddingTable) {
    match direction {
        Direction::XToY => tables,
        Direction::YToX => (tables.1, tables.0),
    }
}

/// Fits the mapping for `direction` on the split's training overlap users.
/// An epoch has as many steps as a pass over the source domain's usable
/// users would, cycling the pairs, so the step budget matches the adapter's.
/// Early-stops on that direction's validation users when there are any.
pub fn train_emcdr(
    tables: (&EmbeddingTable, &EmbeddingTable),
    split: &CdrSplit,
    direction: Direction,
    hyper: &MappingHyper,
) -> Result<TrainedMapping> {
    hyper.validate()?;
    for t in [tables.0, tables.1] {
        if !t.is_frozen() {
            return Err(Error::TrainingInfeasible(format!("backbone `{}` is not frozen", t.domain_id())));
        }
    }
    if tables.0.dim() != tables.1.dim() {
        return Err(Error::DimMismatch { expected: tables.0.dim(), actual: tables.1.dim() });
    }
    if split.train_overlap_users.is_empty() {
        return Err(Error::TrainingInfeasible("no overlapping users to train on".into()));
    }
    let (source, target) = source_target(tables, direction);
    let pairs: Vec<(usize, usize)> = split
        .train_overlap_users
        .iter()
        .map(|&(x, y)| match direction {
            Direction::XToY => (x, y),
            Direction::YToX => (y, x),
        })
        .collect();
    let src_emb = source.users().mapv(f64::from);
    let tgt_emb = target.users().mapv(f64::from);

    let dim = source.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = MappingParams {
        map: Mlp::random(dim, hyper.hidden.unwrap_or(2 * dim), dim, hyper.activation, &mut rng),
        direction,
    };
    let mut opt = Adam::new(hyper.learning_rate, params.map.num_params());
    let validation = split.validation(direction);
    let ks = [hyper.eval_k];

    let held = split.withheld_users(direction == Direction::XToY);
    let pool = source.num_users() - held.len();
    let steps_per_epoch = steps_per_epoch(pairs.len(), pool, hyper.batch_size);
    let mut cycle = PairCycle::new(&pairs, hyper.batch_size);
    let mut history = Vec::new();
    let mut best: Option<((f64, f64), Mlp, usize)> = None;
    let mut stale = 0;
    for epoch in 0..hyper.max_epochs {
        let (mut sum, mut steps) = (0.0, 0usize);
        for _ in 0..steps_per_epoch {
            let chunk = cycle.next_batch(&mut rng);
            let s: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let t: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let xs = src_emb.select(ndarray::Axis(0), &s);
            let ys = tgt_emb.select(ndarray::Axis(0), &t);
            let (loss, grad) = mapping_loss_grad(&params.map, xs.view(), ys.view())?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            opt.step(&mut params.map, &grad);
            sum += loss;
            steps += 1;
        }
        if !params.map.all_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(sum / steps.max(1) as f64);
        if validation.is_empty() {
            continue;
        }
        let m = evaluate_records(validation, target, &ks, |r| emcdr_transfer(&params, source, r.source_user, direction))?;
        let score = (m.hr_at(hyper.eval_k), m.mrr);
        log::debug!("baseline {} epoch {epoch}: loss {:.5} validation {score:?}", direction.label(), history[epoch]);
        if best.as_ref().map_or(true, |(b, _, _)| score.0 > b.0 || (score.0 == b.0 && score.1 > b.1)) {
            best = Some((score, params.map.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, map, e)) => {
            params.map = map;
            e
        }
        None => history.len() - 1,
    };
    Ok(TrainedMapping { params, history, best_epoch })
}

/// Maps a source-domain user into the target domain.
pub fn emcdr_transfer(
    params: &MappingParams,
    source_table: &EmbeddingTable,
    user: usize,
    direction: Direction,
) -> Result<Vec<f64>> {
    if direction != params.direction {
        return Err(Error::InvalidConfig(format!(
            "mapping trained for {} cannot transfer {}",
            params.direction.label(),
            direction.label()
        )));
    }
    let u = source_table
        .user_f64(user)
        .map_err(|_| Error::UnknownUser(format!("{user} in `{}`", source_table.domain_id())))?;
    params.apply(&u)
}

impl MappingParams {
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.map.input_dim() {
            return Err(Error::DimMismatch { expected: self.map.input_dim(), actual: u.len() });
        }
        let x = Array2::from_shape_vec((1, u.len()), u.to_vec()).unwrap();
        Ok(self.map.forward(x.view()).into_raw_vec_and_offset().0)
    }

    pub fn apply_batch(&self, u: ArrayView2<f64>) -> Array2<f64> {
        self.map.forward(u)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAPPING_MAGIC);
        w.u8(match self.direction {
            Direction::XToY => 0,
            Direction::YToX => 1,
        })
        .u64(self.map.input_dim() as u64)
        .u64(self.map.hidden_dim() as u64)
        .u32(self.map.activation.code());
        for s in self.map.slices() {
            w.f64s(s);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, MAPPING_MAGIC)?;
        let direction = match r.u8()? {
            0 => Direction::XToY,
            1 => Direction::YToX,
            d => return Err(Error::Format(format!("unknown direction code {d}"))),
        };
        let dim = r.usize()?;
        let hidden = r.usize()?;
        let activation = Activation::from_code(r.u32()?).ok_or_else(|| Error::Format("unknown activation".into()))?;
        let mut map = Mlp::zeros(dim, hidden, dim, activation);
        for s in map.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&r.f64s(n)?);
        }
        r.finish()?;
        if !map.all_finite() {
            return Err(Error::Format("non-finite mapping weights".into()));
        }
        Ok(Self { map, direction })
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_map_has_zero_loss() {
        let mut map = Mlp::zeros(2, 2, 2, Activation::Identity);
        map.w1 = Array2::eye(2);
        map.w2 = Array2::eye(2);
        let u = array![[1.0, 2.0], [-0.5, 0.3]];
        assert_eq!(mapping_loss(&map, u.view(), u.view()).unwrap(), 0.0);
        let shifted = &u + 1.0;
        // each row misses by (1, 1)
        assert!((mapping_loss(&map, u.view(), shifted.view()).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MappingParams { map: Mlp::random(3, 5, 3, Activation::Softplus, &mut rng), direction: Direction::YToX };
        let back = MappingParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back, p);
        assert!(MappingParams::from_bytes(&p.to_bytes()[..10]).is_err());
    }
}
