//! Experiment configuration (JSON, versioned schema).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterHyper;
use crate::baseline::MappingHyper;
use crate::dataset::{SyntheticConfig, DEFAULT_MIN_ITEM, DEFAULT_MIN_USER};
use crate::error::{Error, Result};
use crate::pipeline::SplitSettings;
use crate::pretrain::BprHyper;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainFile {
    pub path: PathBuf,
    pub domain_id: String,
}

/// Where interactions come from. Relative file paths are resolved against
/// the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated on the fly; the first two domains form the X/Y pair.
    Synthetic(SyntheticConfig),
    Files { x: DomainFile, y: DomainFile },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSettings {
    pub min_item_interactions: usize,
    pub min_user_interactions: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self { min_item_interactions: DEFAULT_MIN_ITEM, min_user_interactions: DEFAULT_MIN_USER }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_etas() -> Vec<f64> {
    vec![0.05, 0.2, 0.5, 1.0]
}

fn default_ks() -> Vec<usize> {
    vec![10, 20]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Where artifacts go. Not part of the experiment identity, so it is left
    /// out of the canonical JSON.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub filter: FilterSettings,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub backbone: BprHyper,
    #[serde(default)]
    pub adapter: AdapterHyper,
    #[serde(default)]
    pub baseline: MappingHyper,
    /// Overlap proportions of the sweep.
    #[serde(default = "default_etas")]
    pub etas: Vec<f64>,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    /// Adds wall-clock timings to manifests, which makes reruns differ.
    #[serde(default)]
    pub record_timings: bool,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub eta: Option<f64>,
}

fn collect(problems: &mut Vec<String>, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::InvalidConfig(msg)) => problems.extend(msg.split("; ").map(str::to_owned)),
        Err(e) => problems.push(e.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(eta) = o.eta {
            self.split.eta = eta;
        }
    }

    /// Checks everything up front and reports every violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            problems.push(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                collect(&mut problems, s.validate());
                if s.num_domains < 2 {
                    problems.push("synthetic data needs at least two domains".into());
                }
            }
            DataSource::Files { x, y } => {
                if x.domain_id.is_empty() || y.domain_id.is_empty() {
                    problems.push("domain ids must be non-empty".into());
                }
                if x.domain_id == y.domain_id {
                    problems.push(format!("domain ids must differ (both are `{}`)", x.domain_id));
                }
            }
        }
        if self.filter.min_item_interactions == 0 || self.filter.min_user_interactions == 0 {
            problems.push("filter thresholds must be at least 1".into());
        }
        let s = &self.split;
        if !(s.eta > 0.0 && s.eta <= 1.0) {
            problems.push(format!("split.eta = {} must lie in (0, 1]", s.eta));
        }
        if !(s.coldstart_frac > 0.0 && s.coldstart_frac < 1.0) {
            problems.push(format!("split.coldstart_frac = {} must lie in (0, 1)", s.coldstart_frac));
        }
        if s.num_negatives == 0 {
            problems.push("split.num_negatives must be at least 1".into());
        }
        collect(&mut problems, self.backbone.validate());
        collect(&mut problems, self.adapter.validate());
        collect(&mut problems, self.baseline.validate());
        if self.etas.is_empty() || self.etas.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            problems.push("etas must be a non-empty list of values in (0, 1]".into());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            problems.push("ks must be a non-empty list of cutoffs >= 1".into());
        }
        if !self.ks.contains(&self.adapter.eval_k) {
            log::warn!("adapter.eval_k = {} is not among the reported ks", self.adapter.eval_k);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// Canonical JSON of the config, as embedded in reports and hashed in
    /// manifests.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
