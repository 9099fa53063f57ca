//! Stage functions shared by the CLI and the experiment harnesses.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, fit_adapter, train_adapter, AdapterData, AdapterHyper, AdapterParams, EpochLog, Hop, Side};
use crate::baseline::{emcdr_transfer, train_emcdr, MappingHyper, MappingParams};
use crate::dataset::{make_cdr_split, sample_negatives, CdrSplit, ColdStartRecord, Direction, InteractionDataset};
use crate::error::{Error, Result};
use crate::eval::{
    avg_latent_distance, evaluate_cold_start, evaluate_records, kl_disentanglement, ColdStartReport, Cohort, KlReport,
    RankingMetrics,
};
use crate::pretrain::{fold_in_user, train_bpr, BprHyper, EmbeddingTable};
use crate::util::derive_seed;

// salts separating the random streams of each stage
const SALT_SPLIT: u64 = 1;
const SALT_NEGATIVES: u64 = 2;
const SALT_BACKBONE_X: u64 = 3;
const SALT_BACKBONE_Y: u64 = 4;
const SALT_ADAPTER: u64 = 5;
const SALT_MAPPING: u64 = 6;
const SALT_FOLD_IN: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Adapter,
    Emcdr,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Adapter, Method::Emcdr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adapter => "adapter",
            Method::Emcdr => "emcdr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(Method::Adapter),
            "emcdr" => Ok(Method::Emcdr),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}` (expected adapter or emcdr)"))),
        }
    }
}

/// Split settings of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub eta: f64,
    pub coldstart_frac: f64,
    pub num_negatives: usize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self { eta: 1.0, coldstart_frac: 0.2, num_negatives: 999 }
    }
}

/// Splits a domain pair and samples evaluation negatives.
pub fn prepare_split(
    ds_x: &InteractionDataset,
    ds_y: &InteractionDataset,
    settings: &SplitSettings,
    seed: u64,
) -> Result<CdrSplit> {
    let split = make_cdr_split(ds_x, ds_y, settings.eta, settings.coldstart_frac, derive_seed(seed, SALT_SPLIT))?;
    sample_negatives(split, ds_x, ds_y, settings.num_negatives, derive_seed(seed, SALT_NEGATIVES))
}

/// Trains and freezes both backbones on the interactions the split allows.
pub fn pretrain_backbones(
    ds_x: &InteractionDataset,
    ds_y: &InteractionDataset,
    split: &CdrSplit,
    hyper: &BprHyper,
    seed: u64,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    split.check_matches(ds_x, ds_y)?;
    let train_x = split.training_dataset(ds_x, true);
    let train_y = split.training_dataset(ds_y, false);
    let hx = BprHyper { seed: derive_seed(seed, SALT_BACKBONE_X), ..hyper.clone() };
    let hy = BprHyper { seed: derive_seed(seed, SALT_BACKBONE_Y), ..hyper.clone() };
    let (tx, ty) = rayon::join(|| train_bpr(&train_x, &hx), || train_bpr(&train_y, &hy));
    Ok((tx?.freeze(), ty?.freeze()))
}

/// A trained cross-domain model of either method.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Adapter(AdapterParams),
    Emcdr { x_to_y: MappingParams, y_to_x: MappingParams },
}

/// Per-epoch training record of a [`Model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum TrainingHistory {
    Adapter { best_epoch: usize, epochs: Vec<EpochLog> },
    Emcdr { best_epoch_x_to_y: usize, best_epoch_y_to_x: usize, loss_x_to_y: Vec<f64>, loss_y_to_x: Vec<f64> },
}

fn sides(dir: Direction) -> (Side, Side) {
    match dir {
        Direction::XToY => (Side::X, Side::Y),
        Direction::YToX => (Side::Y, Side::X),
    }
}

fn source_table<'a>(tables: (&'a EmbeddingTable, &'a EmbeddingTable), dir: Direction) -> &'a EmbeddingTable {
    match dir {
        Direction::XToY => tables.0,
        Direction::YToX => tables.1,
    }
}

fn side_table<'a>(tables: (&'a EmbeddingTable, &'a EmbeddingTable), side: Side) -> &'a EmbeddingTable {
    match side {
        Side::X => tables.0,
        Side::Y => tables.1,
    }
}

impl Model {
    pub fn method(&self) -> Method {
        match self {
            Model::Adapter(_) => Method::Adapter,
            Model::Emcdr { .. } => Method::Emcdr,
        }
    }

    /// Target-space vector for a source-domain user.
    pub fn transfer(
        &self,
        tables: (&EmbeddingTable, &EmbeddingTable),
        dir: Direction,
        source_user: usize,
    ) -> Result<Vec<f64>> {
        let source = source_table(tables, dir);
        match self {
            Model::Adapter(p) => {
                let (src, tgt) = sides(dir);
                adapter::transfer(p, source, source_user, src, tgt)
            }
            Model::Emcdr { x_to_y, y_to_x } => {
                let m = match dir {
                    Direction::XToY => x_to_y,
                    Direction::YToX => y_to_x,
                };
                emcdr_transfer(m, source, source_user, dir)
            }
        }
    }

    /// The representation each method shares across domains for every user
    /// of `side`: prior outputs for the adapter, mapped vectors for EMCDR.
    pub fn shared_representation(&self, tables: (&EmbeddingTable, &EmbeddingTable), side: Side) -> Array2<f64> {
        let users = side_table(tables, side).users().mapv(f64::from);
        match self {
            Model::Adapter(p) => adapter::prior_batch(p, side, users.view()),
            Model::Emcdr { x_to_y, y_to_x } => match side {
                Side::X => x_to_y.apply_batch(users.view()),
                Side::Y => y_to_x.apply_batch(users.view()),
            },
        }
    }
}

/// Trains one method on the split's current training overlap.
pub fn train_model(
    method: Method,
    tables: (&EmbeddingTable, &EmbeddingTable),
    split: &CdrSplit,
    adapter_hyper: &AdapterHyper,
    mapping_hyper: &MappingHyper,
    seed: u64,
) -> Result<(Model, TrainingHistory)> {
    match method {
        Method::Adapter => {
            let hyper = AdapterHyper { seed: derive_seed(seed, SALT_ADAPTER), ..adapter_hyper.clone() };
            let trained = train_adapter(tables, split, &hyper)?;
            let history = TrainingHistory::Adapter { best_epoch: trained.best_epoch, epochs: trained.history };
            Ok((Model::Adapter(trained.params), history))
        }
        Method::Emcdr => {
            let hyper = MappingHyper { seed: derive_seed(seed, SALT_MAPPING), ..mapping_hyper.clone() };
            let xy = train_emcdr(tables, split, Direction::XToY, &hyper)?;
            let yx = train_emcdr(tables, split, Direction::YToX, &hyper)?;
            let history = TrainingHistory::Emcdr {
                best_epoch_x_to_y: xy.best_epoch,
                best_epoch_y_to_x: yx.best_epoch,
                loss_x_to_y: xy.history,
                loss_y_to_x: yx.history,
            };
            Ok((Model::Emcdr { x_to_y: xy.params, y_to_x: yx.params }, history))
        }
    }
}

pub fn evaluate_model(
    model: &Model,
    tables: (&EmbeddingTable, &EmbeddingTable),
    split: &CdrSplit,
    ks: &[usize],
    cohort: Cohort,
) -> Result<ColdStartReport> {
    evaluate_cold_start(split, tables, ks, cohort, |dir, r| model.transfer(tables, dir, r.source_user))
}

/// Target-space reference vectors for the test users, obtained by folding
/// each user's full target history into the frozen target items.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldInTruth {
    pub x_to_y: Array2<f64>,
    pub y_to_x: Array2<f64>,
}

impl FoldInTruth {
    pub fn direction(&self, dir: Direction) -> &Array2<f64> {
        match dir {
            Direction::XToY => &self.x_to_y,
            Direction::YToX => &self.y_to_x,
        }
    }
}

fn fold_in_records(
    records: &[ColdStartRecord],
    target_table: &EmbeddingTable,
    target_ds: &InteractionDataset,
    hyper: &BprHyper,
    seed: u64,
) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| fold_in_user(target_table, target_ds.user_items(r.target_user), hyper, derive_seed(seed, r.target_user as u64)))
        .collect();
    let dim = target_table.dim();
    Array2::from_shape_vec((rows.len(), dim), rows.concat()).expect("fold-in rows have the table dimension")
}

pub fn fold_in_truth(
    tables: (&EmbeddingTable, &EmbeddingTable),
    datasets: (&InteractionDataset, &InteractionDataset),
    split: &CdrSplit,
    hyper: &BprHyper,
    seed: u64,
) -> Result<FoldInTruth> {
    split.check_matches(datasets.0, datasets.1)?;
    let seed = derive_seed(seed, SALT_FOLD_IN);
    Ok(FoldInTruth {
        x_to_y: fold_in_records(&split.test_x_to_y, tables.1, datasets.1, hyper, derive_seed(seed, 0)),
        y_to_x: fold_in_records(&split.test_y_to_x, tables.0, datasets.0, hyper, derive_seed(seed, 1)),
    })
}

/// Stacked transferred vectors of the test users, both directions, in the
/// same row order as [`FoldInTruth`].
pub fn inferred_test_vectors(
    model: &Model,
    tables: (&EmbeddingTable, &EmbeddingTable),
    split: &CdrSplit,
    dir: Direction,
) -> Result<Array2<f64>> {
    let dim = source_table(tables, dir.reverse()).dim();
    let rows = split
        .test(dir)
        .par_iter()
        .map(|r| model.transfer(tables, dir, r.source_user))
        .collect::<Result<Vec<_>>>()?;
    Ok(Array2::from_shape_vec((rows.len(), dim), rows.concat()).expect("transfer keeps the dimension"))
}

/// Mean distance between transferred vectors and the fold-in reference
/// over the test users of both directions.
pub fn latent_distance(
    model: &Model,
    tables: (&EmbeddingTable, &EmbeddingTable),
    split: &CdrSplit,
    truth: &FoldInTruth,
) -> Result<f64> {
    let mut inferred = Vec::new();
    let mut reference = Vec::new();
    for dir in Direction::BOTH {
        inferred.push(inferred_test_vectors(model, tables, split, dir)?);
        reference.push(truth.direction(dir).clone());
    }
    let views = |m: &Vec<Array2<f64>>| ndarray::concatenate(Axis(0), &[m[0].view(), m[1].view()]);
    let (a, b) = (views(&inferred), views(&reference));
    match (a, b) {
        (Ok(a), Ok(b)) => avg_latent_distance(a.view(), b.view()),
        _ => Err(Error::DimMismatch { expected: truth.x_to_y.ncols(), actual: truth.y_to_x.ncols() }),
    }
}

/// KL between backbone embeddings and shared representations, averaged
/// over the two domains.
pub fn model_kl(model: &Model, tables: (&EmbeddingTable, &EmbeddingTable)) -> Result<KlReport> {
    let mut total = 0.0;
    let mut floored = 0;
    for side in [Side::X, Side::Y] {
        let specific = side_table(tables, side).users().mapv(f64::from);
        let shared = model.shared_representation(tables, side);
        let r = kl_disentanglement(specific.view(), shared.view())?;
        total += r.kl_divergence;
        floored += r.floored_dims;
    }
    Ok(KlReport { kl_divergence: total / 2.0, floored_dims: floored })
}

/// One method's latent-space diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub method: Method,
    pub avg_latent_distance: f64,
    pub kl_divergence: f64,
    pub kl_floored_dims: usize,
    pub n_test_users: usize,
}

pub fn analyze_model(
    model: &Model,
    tables: (&EmbeddingTable, &EmbeddingTable),
    split: &CdrSplit,
    truth: &FoldInTruth,
) -> Result<AnalysisRow> {
    let kl = model_kl(model, tables)?;
    Ok(AnalysisRow {
        method: model.method(),
        avg_latent_distance: latent_distance(model, tables, split, truth)?,
        kl_divergence: kl.kl_divergence,
        kl_floored_dims: kl.floored_dims,
        n_test_users: split.test_x_to_y.len() + split.test_y_to_x.len(),
    })
}

/// Test metrics of one method at one overlap proportion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub eta: f64,
    pub train_overlap_users: usize,
    pub report: ColdStartReport,
}

/// Retrains each method at every `eta` on the same backbones and holdout.
pub fn overlap_sweep(
    tables: (&EmbeddingTable, &EmbeddingTable),
    split: &CdrSplit,
    etas: &[f64],
    methods: &[Method],
    ks: &[usize],
    adapter_hyper: &AdapterHyper,
    mapping_hyper: &MappingHyper,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &eta in etas {
        let s = split.with_eta(eta)?;
        for &method in methods {
            let (model, _) = train_model(method, tables, &s, adapter_hyper, mapping_hyper, seed)?;
            let report = evaluate_model(&model, tables, &s, ks, Cohort::Test)?;
            log::info!("sweep eta {eta} {method}: hr {:?} mrr {:.4}", report.macro_avg.hr, report.macro_avg.mrr);
            rows.push(SweepRow { method, eta, train_overlap_users: s.train_overlap_users.len(), report });
        }
    }
    Ok(rows)
}

/// `(a_index, b_index)` for every external id active in both datasets.
pub fn active_overlap(a: &InteractionDataset, b: &InteractionDataset) -> Vec<(usize, usize)> {
    (0..a.num_users())
        .filter(|&u| !a.user_items(u).is_empty())
        .filter_map(|u| b.user_index(a.user_id(u)).map(|v| (u, v)))
        .filter(|&(_, v)| !b.user_items(v).is_empty())
        .collect()
}

fn active_users(ds: &InteractionDataset) -> Vec<usize> {
    (0..ds.num_users()).filter(|&u| !ds.user_items(u).is_empty()).collect()
}

/// Settings of a two-hop cascade run.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeSettings {
    pub split: SplitSettings,
    pub bpr: BprHyper,
    /// Runs for `max_epochs` without early stopping.
    pub adapter: AdapterHyper,
    pub ks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutcome {
    /// Test cohort transferring from the first domain to the last.
    pub metrics: RankingMetrics,
    pub pairs_ab: usize,
    pub pairs_bc: usize,
}

/// Transfers first-domain users to the third domain through two adapters,
/// one trained on the first two domains and one on the last two. The
/// held-out users' third-domain history is hidden from every stage.
pub fn cascade_experiment(
    a: &InteractionDataset,
    b: &InteractionDataset,
    c: &InteractionDataset,
    settings: &CascadeSettings,
    seed: u64,
) -> Result<CascadeOutcome> {
    let split_ac = prepare_split(a, c, &settings.split, seed)?;
    let a_train = split_ac.training_dataset(a, true);
    let c_train = split_ac.training_dataset(c, false);
    let hyper = |salt| BprHyper { seed: derive_seed(seed, salt), ..settings.bpr.clone() };
    let (ha, hb, hc) = (hyper(SALT_BACKBONE_X), hyper(SALT_BACKBONE_Y), hyper(SALT_BACKBONE_Y + 100));
    let (ta, (tb, tc)) =
        rayon::join(|| train_bpr(&a_train, &ha), || rayon::join(|| train_bpr(b, &hb), || train_bpr(&c_train, &hc)));
    let (ta, tb, tc) = (ta?.freeze(), tb?.freeze(), tc?.freeze());

    let held_out: HashSet<&str> = split_ac.test_x_to_y.iter().chain(&split_ac.validation_x_to_y).map(|r| r.user_id.as_str()).collect();
    let data_ab = AdapterData { pairs: active_overlap(&a_train, b), recon_x: active_users(&a_train), recon_y: active_users(b) };
    let data_bc = AdapterData {
        pairs: active_overlap(b, &c_train).into_iter().filter(|&(u, _)| !held_out.contains(b.user_id(u))).collect(),
        recon_x: active_users(b),
        recon_y: active_users(&c_train),
    };
    let h_ab = AdapterHyper { seed: derive_seed(seed, SALT_ADAPTER), ..settings.adapter.clone() };
    let h_bc = AdapterHyper { seed: derive_seed(seed, SALT_ADAPTER + 100), ..settings.adapter.clone() };
    let ab = fit_adapter((&ta, &tb), &data_ab, &h_ab, None)?;
    let bc = fit_adapter((&tb, &tc), &data_bc, &h_bc, None)?;

    let hops = [
        Hop { params: &ab.params, from: Side::X, to: Side::Y },
        Hop { params: &bc.params, from: Side::X, to: Side::Y },
    ];
    let metrics = evaluate_records(&split_ac.test_x_to_y, &tc, &settings.ks, |r| {
        adapter::cascade(&hops, &ta.user_f64(r.source_user)?)
    })?;
    Ok(CascadeOutcome { metrics, pairs_ab: data_ab.pairs.len(), pairs_bc: data_bc.pairs.len() })
}
