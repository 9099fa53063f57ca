//! `cdr` command-line harness.
//!
//! Every stage reads the artifacts of earlier stages from the output
//! directory and writes its own next to a `manifest*.json` listing the
//! sha256 of every input and output.
//!
//! ```text
//! <out>/synth/{<domain>.tsv, ground_truth.json}
//! <out>/prepare/{x.json, y.json, split.json}
//! <out>/pretrain/{x.emb, y.emb}
//! <out>/train/{adapter.bin, adapter.json, emcdr_x_to_y.bin, emcdr_y_to_x.bin, emcdr.json}
//! <out>/evaluate/{<method>.csv, <method>.json}
//! <out>/sweep/{sweep.csv, sweep.json}
//! <out>/analyze/{analysis.csv, analysis.json}
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::adapter::AdapterParams;
use crate::baseline::MappingParams;
use crate::config::{DataSource, ExperimentConfig, Overrides};
use crate::dataset::{
    filter_min_counts, generate_synthetic, load_interactions, CdrSplit, Direction, InteractionDataset,
};
use crate::error::{Error, Result};
use crate::eval::{ColdStartReport, Cohort, RankingMetrics};
use crate::pipeline::{
    analyze_model, evaluate_model, fold_in_truth, overlap_sweep, prepare_split, pretrain_backbones, train_model,
    AnalysisRow, Method, Model, SweepRow, TrainingHistory,
};
use crate::pretrain::EmbeddingTable;
use crate::util::sha256_hex;

pub const TOOL_VERSION: &str = concat!("cdr-core v", env!("CARGO_PKG_VERSION"));

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Adapter,
    Emcdr,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Adapter => Method::Adapter,
            MethodArg::Emcdr => Method::Emcdr,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cdr", version, about = "Cold-start cross-domain recommendation experiments")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the overlap proportion used for training.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic domains and their ground-truth latents.
    Synth,
    /// Load, filter and split the two domains; sample evaluation negatives.
    Prepare,
    /// Train and freeze one BPR backbone per domain.
    Pretrain,
    /// Train a cross-domain model on the frozen backbones.
    Train {
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Cold-start metrics of a trained model on the test users.
    Evaluate {
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Retrain at every configured overlap proportion.
    Sweep {
        /// Restrict to one method (default: both).
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Latent distance to fold-in references and KL diagnostics.
    Analyze {
        /// Restrict to one method (default: both).
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Prepare => "prepare",
            Command::Pretrain => "pretrain",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::Analyze { .. } => "analyze",
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::MissingArtifact { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| Error::InvalidConfig("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply(&Overrides { seed: cli.seed, output_dir: cli.out.clone(), eta: cli.eta });
    cfg.validate()?;
    let ctx = Ctx::new(cfg);
    let started = Instant::now();
    match &cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::Prepare => cmd_prepare(&ctx),
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Train { method } => cmd_train(&ctx, (*method).into()),
        Command::Evaluate { method } => cmd_evaluate(&ctx, (*method).into()),
        Command::Sweep { method } => cmd_sweep(&ctx, &methods(*method)),
        Command::Analyze { method } => cmd_analyze(&ctx, &methods(*method)),
    }?;
    log::info!("{} finished in {:.1?}", cli.command.name(), started.elapsed());
    Ok(())
}

fn methods(m: Option<MethodArg>) -> Vec<Method> {
    m.map_or_else(|| Method::ALL.to_vec(), |m| vec![m.into()])
}

/// Resolved config plus the paths derived from it.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    config_hash: String,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let config_hash = sha256_hex(cfg.to_canonical_json().as_bytes());
        let out = cfg.output_dir.clone();
        Self { cfg, out, config_hash }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

/// Records hashes of everything a stage reads and writes.
struct Stage<'a> {
    ctx: &'a Ctx,
    command: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    timings: BTreeMap<String, u64>,
    clock: Instant,
}

impl<'a> Stage<'a> {
    fn new(ctx: &'a Ctx, command: impl Into<String>) -> Self {
        Self {
            ctx,
            command: command.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
            clock: Instant::now(),
        }
    }

    /// Reads an upstream artifact, or names the command that produces it.
    fn input(&mut self, rel: &str, producer: &'static str) -> Result<Vec<u8>> {
        let path = self.ctx.path(rel);
        if !path.is_file() {
            return Err(Error::MissingArtifact { path, command: producer });
        }
        let bytes = fs::read(&path)?;
        self.inputs.insert(rel.to_owned(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn output(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.ctx.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.outputs.insert(rel.to_owned(), sha256_hex(bytes));
        Ok(())
    }

    fn output_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.output(rel, text.as_bytes())
    }

    fn lap(&mut self, name: &str) {
        self.timings.insert(name.to_owned(), self.clock.elapsed().as_millis() as u64);
        self.clock = Instant::now();
    }

    fn finish(self, rel: &str) -> Result<()> {
        let mut manifest = json!({
            "tool_version": TOOL_VERSION,
            "command": self.command,
            "seed": self.ctx.cfg.seed,
            "config_sha256": self.ctx.config_hash,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        if self.ctx.cfg.record_timings {
            manifest["timings_ms"] = json!(self.timings);
        }
        let path = self.ctx.path(rel);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

fn report_header(ctx: &Ctx, command: &str) -> serde_json::Value {
    json!({
        "tool_version": TOOL_VERSION,
        "command": command,
        "seed": ctx.cfg.seed,
        "config": ctx.cfg,
    })
}

fn load_source(ctx: &Ctx) -> Result<(InteractionDataset, InteractionDataset)> {
    let (x, y) = match &ctx.cfg.data {
        DataSource::Synthetic(s) => {
            let (mut ds, _) = generate_synthetic(s, ctx.cfg.seed)?;
            ds.truncate(2);
            let y = ds.pop().expect("two synthetic domains");
            let x = ds.pop().expect("two synthetic domains");
            (x, y)
        }
        DataSource::Files { x, y } => {
            (load_interactions(&x.path, &x.domain_id)?, load_interactions(&y.path, &y.domain_id)?)
        }
    };
    let f = &ctx.cfg.filter;
    Ok((
        filter_min_counts(&x, f.min_item_interactions, f.min_user_interactions)?,
        filter_min_counts(&y, f.min_item_interactions, f.min_user_interactions)?,
    ))
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let DataSource::Synthetic(s) = &ctx.cfg.data else {
        return Err(Error::InvalidConfig("synth needs a `synthetic` data source".into()));
    };
    let mut stage = Stage::new(ctx, "synth");
    let (datasets, truth) = generate_synthetic(s, ctx.cfg.seed)?;
    for ds in &datasets {
        let mut text = String::from("user\titem\n");
        for (u, i) in ds.pairs() {
            text.push_str(&format!("{}\t{}\n", ds.user_id(u), ds.item_ids()[i]));
        }
        stage.output(&format!("synth/{}.tsv", ds.domain_id()), text.as_bytes())?;
    }
    stage.output_json("synth/ground_truth.json", &truth)?;
    stage.lap("generate");
    stage.finish("synth/manifest.json")
}

struct Prepared {
    x: InteractionDataset,
    y: InteractionDataset,
    split: CdrSplit,
}

fn cmd_prepare(ctx: &Ctx) -> Result<()> {
    let mut stage = Stage::new(ctx, "prepare");
    let (x, y) = load_source(ctx)?;
    stage.lap("load");
    let split = prepare_split(&x, &y, &ctx.cfg.split, ctx.cfg.seed)?;
    stage.lap("split");
    log::info!(
        "prepare: {} overlap users, {} training pairs, {}+{} test users",
        split.overlap_users.len(),
        split.train_overlap_users.len(),
        split.test_x_to_y.len(),
        split.test_y_to_x.len()
    );
    stage.output_json("prepare/x.json", &x)?;
    stage.output_json("prepare/y.json", &y)?;
    stage.output_json("prepare/split.json", &split)?;
    stage.finish("prepare/manifest.json")
}

fn read_prepared(stage: &mut Stage<'_>) -> Result<Prepared> {
    let x: InteractionDataset = serde_json::from_slice(&stage.input("prepare/x.json", "prepare")?)?;
    let y: InteractionDataset = serde_json::from_slice(&stage.input("prepare/y.json", "prepare")?)?;
    let split: CdrSplit = serde_json::from_slice(&stage.input("prepare/split.json", "prepare")?)?;
    split.check_matches(&x, &y)?;
    let split = split.with_eta(stage.ctx.cfg.split.eta)?;
    Ok(Prepared { x, y, split })
}

fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let mut stage = Stage::new(ctx, "pretrain");
    let p = read_prepared(&mut stage)?;
    let (tx, ty) = pretrain_backbones(&p.x, &p.y, &p.split, &ctx.cfg.backbone, ctx.cfg.seed)?;
    stage.lap("train");
    stage.output("pretrain/x.emb", &tx.to_bytes())?;
    stage.output("pretrain/y.emb", &ty.to_bytes())?;
    stage.finish("pretrain/manifest.json")
}

fn read_tables(stage: &mut Stage<'_>) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let x = EmbeddingTable::from_bytes(&stage.input("pretrain/x.emb", "pretrain")?)?;
    let y = EmbeddingTable::from_bytes(&stage.input("pretrain/y.emb", "pretrain")?)?;
    Ok((x, y))
}

fn cmd_train(ctx: &Ctx, method: Method) -> Result<()> {
    let mut stage = Stage::new(ctx, format!("train --method {method}"));
    let p = read_prepared(&mut stage)?;
    let (tx, ty) = read_tables(&mut stage)?;
    let (model, history) =
        train_model(method, (&tx, &ty), &p.split, &ctx.cfg.adapter, &ctx.cfg.baseline, ctx.cfg.seed)?;
    stage.lap("train");
    let mut sidecar = json!({
        "tool_version": TOOL_VERSION,
        "method": method,
        "seed": ctx.cfg.seed,
        "eta": p.split.eta,
        "train_overlap_users": p.split.train_overlap_users.len(),
        "history": history,
    });
    match &model {
        Model::Adapter(params) => {
            stage.output("train/adapter.bin", &params.to_bytes())?;
            sidecar["hyperparameters"] = json!(ctx.cfg.adapter);
            stage.output_json("train/adapter.json", &sidecar)?;
        }
        Model::Emcdr { x_to_y, y_to_x } => {
            stage.output("train/emcdr_x_to_y.bin", &x_to_y.to_bytes())?;
            stage.output("train/emcdr_y_to_x.bin", &y_to_x.to_bytes())?;
            sidecar["hyperparameters"] = json!(ctx.cfg.baseline);
            stage.output_json("train/emcdr.json", &sidecar)?;
        }
    }
    if let TrainingHistory::Adapter { best_epoch, epochs } = &history {
        log::info!("adapter: best epoch {best_epoch} of {}", epochs.len());
    }
    stage.finish(&format!("train/manifest_{method}.json"))
}

fn read_model(stage: &mut Stage<'_>, method: Method) -> Result<Model> {
    match method {
        Method::Adapter => {
            Ok(Model::Adapter(AdapterParams::from_bytes(&stage.input("train/adapter.bin", "train --method adapter")?)?))
        }
        Method::Emcdr => {
            let xy = MappingParams::from_bytes(&stage.input("train/emcdr_x_to_y.bin", "train --method emcdr")?)?;
            let yx = MappingParams::from_bytes(&stage.input("train/emcdr_y_to_x.bin", "train --method emcdr")?)?;
            if xy.direction != Direction::XToY || yx.direction != Direction::YToX {
                return Err(Error::Format("mapping files hold the wrong directions".into()));
            }
            Ok(Model::Emcdr { x_to_y: xy, y_to_x: yx })
        }
    }
}

/// One CSV row per method, eta and direction (plus the macro average).
fn metrics_csv(rows: &[(Method, f64, &ColdStartReport)], ks: &[usize], domains: (&str, &str)) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["method", "eta", "direction", "source", "target", "n_users"].map(String::from).to_vec();
    header.extend(ks.iter().map(|k| format!("hr@{k}")));
    header.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    header.push("mrr".into());
    w.write_record(&header)?;
    for &(method, eta, report) in rows {
        let parts: [(&str, &str, &str, Option<&RankingMetrics>); 3] = [
            ("x_to_y", domains.0, domains.1, report.x_to_y.as_ref()),
            ("y_to_x", domains.1, domains.0, report.y_to_x.as_ref()),
            ("macro", "", "", Some(&report.macro_avg)),
        ];
        for (label, src, tgt, m) in parts {
            let Some(m) = m else { continue };
            let mut rec = vec![method.to_string(), eta.to_string(), label.into(), src.into(), tgt.into(), m.n_users.to_string()];
            rec.extend(ks.iter().map(|&k| m.hr_at(k).to_string()));
            rec.extend(ks.iter().map(|&k| m.ndcg_at(k).to_string()));
            rec.push(m.mrr.to_string());
            w.write_record(&rec)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn cmd_evaluate(ctx: &Ctx, method: Method) -> Result<()> {
    let mut stage = Stage::new(ctx, format!("evaluate --method {method}"));
    let model = read_model(&mut stage, method)?;
    let p = read_prepared(&mut stage)?;
    let (tx, ty) = read_tables(&mut stage)?;
    let report = evaluate_model(&model, (&tx, &ty), &p.split, &ctx.cfg.ks, Cohort::Test)?;
    stage.lap("evaluate");
    let csv = metrics_csv(&[(method, p.split.eta, &report)], &ctx.cfg.ks, (&p.split.domain_x, &p.split.domain_y))?;
    stage.output(&format!("evaluate/{method}.csv"), &csv)?;
    let mut summary = report_header(ctx, "evaluate");
    summary["method"] = json!(method);
    summary["eta"] = json!(p.split.eta);
    summary["domains"] = json!([p.split.domain_x, p.split.domain_y]);
    summary["metrics"] = json!(report);
    stage.output_json(&format!("evaluate/{method}.json"), &summary)?;
    stage.finish(&format!("evaluate/manifest_{method}.json"))
}

fn cmd_sweep(ctx: &Ctx, methods: &[Method]) -> Result<()> {
    let mut stage = Stage::new(ctx, "sweep");
    let p = read_prepared(&mut stage)?;
    let (tx, ty) = read_tables(&mut stage)?;
    let rows: Vec<SweepRow> = overlap_sweep(
        (&tx, &ty),
        &p.split,
        &ctx.cfg.etas,
        methods,
        &ctx.cfg.ks,
        &ctx.cfg.adapter,
        &ctx.cfg.baseline,
        ctx.cfg.seed,
    )?;
    stage.lap("sweep");
    let flat: Vec<(Method, f64, &ColdStartReport)> = rows.iter().map(|r| (r.method, r.eta, &r.report)).collect();
    stage.output("sweep/sweep.csv", &metrics_csv(&flat, &ctx.cfg.ks, (&p.split.domain_x, &p.split.domain_y))?)?;
    let mut summary = report_header(ctx, "sweep");
    summary["rows"] = json!(rows);
    stage.output_json("sweep/sweep.json", &summary)?;
    stage.finish("sweep/manifest.json")
}

const KL_NOTE: &str = "kl_divergence: per domain, a diagonal Gaussian (population variance, floor 1e-8) is fitted to the \
frozen backbone user embeddings and to the method's shared representation of the same users (adapter prior \
outputs, EMCDR mapped vectors); the symmetrized KL summed over dimensions is averaged over both domains. \
avg_latent_distance: mean Euclidean distance between transferred test users and their fold-in reference in the \
target backbone space.";

fn cmd_analyze(ctx: &Ctx, methods: &[Method]) -> Result<()> {
    let mut stage = Stage::new(ctx, "analyze");
    let models = methods.iter().map(|&m| read_model(&mut stage, m)).collect::<Result<Vec<_>>>()?;
    let p = read_prepared(&mut stage)?;
    let (tx, ty) = read_tables(&mut stage)?;
    let truth = fold_in_truth((&tx, &ty), (&p.x, &p.y), &p.split, &ctx.cfg.backbone, ctx.cfg.seed)?;
    stage.lap("fold_in");
    let rows = models.iter().map(|m| analyze_model(m, (&tx, &ty), &p.split, &truth)).collect::<Result<Vec<AnalysisRow>>>()?;
    stage.lap("analyze");

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "avg_latent_distance", "kl_divergence", "kl_floored_dims", "n_test_users"])?;
    for r in &rows {
        w.write_record([
            r.method.to_string(),
            r.avg_latent_distance.to_string(),
            r.kl_divergence.to_string(),
            r.kl_floored_dims.to_string(),
            r.n_test_users.to_string(),
        ])?;
    }
    let csv = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    stage.output("analyze/analysis.csv", &csv)?;
    let mut summary = report_header(ctx, "analyze");
    summary["definitions"] = json!(KL_NOTE);
    summary["rows"] = json!(rows);
    stage.output_json("analyze/analysis.json", &summary)?;
    stage.finish("analyze/manifest.json")
}

/// Reads a manifest written by any stage.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<serde_json::Value> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
