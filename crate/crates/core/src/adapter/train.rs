use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdapterParams, LossBreakdown, Side};
use crate::batching::{steps_per_epoch, PairCycle};
use crate::dataset::CdrSplit;
use crate::error::{Error, Result};
use crate::eval::{evaluate_cold_start, Cohort};
use crate::nn::{Activation, Adam, ParamSet};
use crate::pretrain::EmbeddingTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterHyper {
    /// Hidden width of priors and decoders; twice the embedding dim if unset.
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub tau: f64,
    pub lambdas: [f64; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub diagonal_scale: bool,
    /// Keep the scale maps in the transfer path at inference.
    pub scale_at_inference: bool,
    /// Cutoff of the validation hit rate used for early stopping.
    pub eval_k: usize,
    /// Set from the experiment seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AdapterHyper {
    fn default() -> Self {
        Self {
            hidden: None,
            activation: Activation::Softplus,
            tau: 0.2,
            lambdas: [1.0; 3],
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            diagonal_scale: false,
            scale_at_inference: false,
            eval_k: 10,
            seed: 0,
        }
    }
}

impl AdapterHyper {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            problems.push("adapter tau must be positive".to_owned());
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            problems.push("adapter lambdas must be non-negative".to_owned());
        }
        if self.batch_size < 2 {
            problems.push("adapter batch_size must be at least 2".to_owned());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("adapter learning_rate must be positive".to_owned());
        }
        if self.max_epochs == 0 || self.eval_k == 0 || self.hidden == Some(0) {
            problems.push("adapter max_epochs, eval_k and hidden must be positive".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Rows the adapter trains on.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterData {
    /// `(x_user, y_user)` overlapping pairs for the alignment terms.
    pub pairs: Vec<(usize, usize)>,
    /// Users of each domain available to the reconstruction term.
    pub recon_x: Vec<usize>,
    pub recon_y: Vec<usize>,
}

impl AdapterData {
    /// Training overlap pairs of the split; reconstruction draws on every
    /// backbone user except those whose interactions were withheld.
    pub fn from_split(split: &CdrSplit, tables: (&EmbeddingTable, &EmbeddingTable)) -> Self {
        let held_x = split.withheld_users(true);
        let held_y = split.withheld_users(false);
        Self {
            pairs: split.train_overlap_users.clone(),
            recon_x: (0..tables.0.num_users()).filter(|u| !held_x.contains(u)).collect(),
            recon_y: (0..tables.1.num_users()).filter(|u| !held_y.contains(u)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub validation_hr: Option<f64>,
    pub validation_mrr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedAdapter {
    pub params: AdapterParams,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Validation callback: returns `(hit rate, mrr)` for candidate parameters.
pub type Validator<'a> = dyn Fn(&AdapterParams) -> Result<(f64, f64)> + 'a;

fn gather(emb: &Array2<f64>, rows: impl Iterator<Item = usize>) -> Array2<f64> {
    let rows: Vec<usize> = rows.collect();
    emb.select(ndarray::Axis(0), &rows)
}

fn sample_rows(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|k| pool[k])
        .collect()
}

fn check_frozen(tables: (&EmbeddingTable, &EmbeddingTable)) -> Result<()> {
    for t in [tables.0, tables.1] {
        if !t.is_frozen() {
            return Err(Error::TrainingInfeasible(format!("backbone `{}` is not frozen", t.domain_id())));
        }
    }
    if tables.0.dim() != tables.1.dim() {
        return Err(Error::DimMismatch { expected: tables.0.dim(), actual: tables.1.dim() });
    }
    Ok(())
}

/// Trains an adapter on explicit rows. An epoch is one pass over the
/// larger of the pair set and the reconstruction pools. With a validator, the parameters of
/// the best validation epoch are returned and training stops after
/// `patience` epochs without improvement.
pub fn fit_adapter(
    tables: (&EmbeddingTable, &EmbeddingTable),
    data: &AdapterData,
    hyper: &AdapterHyper,
    validator: Option<&Validator<'_>>,
) -> Result<TrainedAdapter> {
    hyper.validate()?;
    check_frozen(tables)?;
    if data.pairs.is_empty() {
        return Err(Error::TrainingInfeasible("no overlapping users to train on".into()));
    }
    if data.recon_x.is_empty() || data.recon_y.is_empty() {
        return Err(Error::TrainingInfeasible("no users available for reconstruction".into()));
    }
    let dim = tables.0.dim();
    let x_emb = tables.0.users().mapv(f64::from);
    let y_emb = tables.1.users().mapv(f64::from);

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let hidden = hyper.hidden.unwrap_or(2 * dim);
    let mut params = AdapterParams::random(
        dim,
        hidden,
        hyper.activation,
        hyper.tau,
        hyper.lambdas,
        hyper.diagonal_scale,
        &mut rng,
    );
    params.scale_at_inference = hyper.scale_at_inference;
    let mut opt = Adam::new(hyper.learning_rate, params.num_params());
    let mut cycle = PairCycle::new(&data.pairs, hyper.batch_size);
    let steps_per_epoch =
        steps_per_epoch(data.pairs.len(), data.recon_x.len().max(data.recon_y.len()), hyper.batch_size);
    let mut history = Vec::new();
    let mut best: Option<((f64, f64), AdapterParams, usize)> = None;
    let mut stale = 0;

    for epoch in 0..hyper.max_epochs {
        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for _ in 0..steps_per_epoch {
            let chunk = cycle.next_batch(&mut rng).to_vec();
            if chunk.len() < 2 {
                log::warn!("adapter epoch {epoch}: dropping a batch with a single overlapping user");
                continue;
            }
            let px = gather(&x_emb, chunk.iter().map(|p| p.0));
            let py = gather(&y_emb, chunk.iter().map(|p| p.1));
            let rx = gather(&x_emb, sample_rows(&mut rng, &data.recon_x, hyper.batch_size).into_iter());
            let ry = gather(&y_emb, sample_rows(&mut rng, &data.recon_y, hyper.batch_size).into_iter());
            let (loss, grad) = params.objective(px.view(), py.view(), rx.view(), ry.view())?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            opt.step(&mut params, &grad);
            sum.l1 += loss.l1;
            sum.l2 += loss.l2;
            sum.l3 += loss.l3;
            sum.total += loss.total;
            steps += 1;
        }
        if !params.all_finite() {
            return Err(Error::Divergence { epoch });
        }
        let n = steps.max(1) as f64;
        let loss = LossBreakdown { l1: sum.l1 / n, l2: sum.l2 / n, l3: sum.l3 / n, total: sum.total / n };

        let score = validator.map(|v| v(&params)).transpose()?;
        log::debug!("adapter epoch {epoch}: {loss:?} validation {score:?}");
        history.push(EpochLog {
            epoch,
            loss,
            validation_hr: score.map(|s| s.0),
            validation_mrr: score.map(|s| s.1),
        });
        if let Some(score) = score {
            // hit rate first, mrr breaks ties
            let improved = best.as_ref().map_or(true, |(b, _, _)| score.0 > b.0 || (score.0 == b.0 && score.1 > b.1));
            if improved {
                best = Some((score, params.clone(), epoch));
                stale = 0;
            } else {
                stale += 1;
                if stale >= hyper.patience {
                    break;
                }
            }
        }
    }

    let (params, best_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => (params, history.len().saturating_sub(1)),
    };
    Ok(TrainedAdapter { params, history, best_epoch })
}

/// Trains on a split's overlap users with early stopping on its validation
/// cold-start users (both directions, macro-averaged).
pub fn train_adapter(
    tables: (&EmbeddingTable, &EmbeddingTable),
    split: &CdrSplit,
    hyper: &AdapterHyper,
) -> Result<TrainedAdapter> {
    check_frozen(tables)?;
    let data = AdapterData::from_split(split, tables);
    let has_validation = split.validation_x_to_y.iter().chain(&split.validation_y_to_x).any(|r| !r.negatives.is_empty());
    let k = hyper.eval_k;
    let validator = |p: &AdapterParams| -> Result<(f64, f64)> {
        let report = evaluate_cold_start(split, tables, &[k], Cohort::Validation, |dir, r| {
            let (src, tgt, table) = match dir {
                crate::dataset::Direction::XToY => (Side::X, Side::Y, tables.0),
                crate::dataset::Direction::YToX => (Side::Y, Side::X, tables.1),
            };
            super::transfer(p, table, r.source_user, src, tgt)
        })?;
        Ok((report.macro_avg.hr_at(k), report.macro_avg.mrr))
    };
    fit_adapter(tables, &data, hyper, has_validation.then_some(&validator as &Validator<'_>))
}
