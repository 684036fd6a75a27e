//! Run configuration file.
//!
//! ```json
//! {
//!   "version": 1,
//!   "data": {"synthetic": {"n_sites": 300, "seed": 1}},
//!   "selection": {"num_selected": 200},
//!   "model": {"hidden": 32},
//!   "train": {"epochs": [400, 40, 40]},
//!   "holdout": {"fraction": 0.0, "planted": false, "edges": null, "candidate_strength": 0.01},
//!   "split": [0.7, 0.15, 0.15],
//!   "seed": 1,
//!   "out_dir": "out"
//! }
//! ```
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected. Without `selection` every ontology site measured in all
//! datasets is a model input; `{}` keeps sites with p ≤ 0.05. `data` is either `{"synthetic": {...}}` or
//! `{"files": {"site_gene", "gene_sets", "tasks": [{"id", "betas", "labels"}],
//! "impute_missing"}}` with paths relative to the config file. `seed` drives
//! splitting, initialization, hold-out and training; synthetic data keeps
//! its own seed so repeated runs see the same cohort.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SynthConfig, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::model::DEFAULT_HIDDEN;
use crate::training::TrainPlan;

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_CANDIDATE_STRENGTH: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SynthConfig),
    Files(FilesConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesConfig {
    pub site_gene: PathBuf,
    pub gene_sets: PathBuf,
    pub tasks: Vec<TaskFiles>,
    #[serde(default)]
    pub impute_missing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFiles {
    pub id: String,
    pub betas: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Smallest p-values kept per dataset. Without it every site with
    /// p ≤ 0.05 is kept.
    pub num_selected: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
        }
    }
}

/// Site-gene edges hidden from the mask. At most one source may be active:
/// a random `fraction` of known edges, the edges planted by the synthetic
/// generator, or an `edges` file (`site_id<TAB>gene_id` with header).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoldoutConfig {
    pub fraction: f64,
    pub planted: bool,
    pub edges: Option<PathBuf>,
    /// Mask value given to held-out edges and to every non-edge.
    pub candidate_strength: f64,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self {
            fraction: 0.0,
            planted: false,
            edges: None,
            candidate_strength: DEFAULT_CANDIDATE_STRENGTH,
        }
    }
}

impl HoldoutConfig {
    pub fn is_active(&self) -> bool {
        self.fraction > 0.0 || self.planted || self.edges.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub data: DataConfig,
    /// Site selection; absent means every site is a model input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainPlan,
    #[serde(default)]
    pub holdout: HoldoutConfig,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_split() -> [f64; 3] {
    DEFAULT_FRACTIONS
}

fn default_seed() -> u64 {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data: DataConfig::default(),
            selection: None,
            model: ModelConfig::default(),
            train: TrainPlan::default(),
            holdout: HoldoutConfig::default(),
            split: DEFAULT_FRACTIONS,
            seed: 1,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative data paths are kept as
    /// written; resolve them against [`RunConfig::base_dir`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_slice(&bytes).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            ));
        }
        match &self.data {
            DataConfig::Synthetic(s) => s.validate()?,
            DataConfig::Files(f) => {
                if f.tasks.is_empty() {
                    return bad("data.files.tasks is empty".into());
                }
                let mut ids: Vec<&str> = f.tasks.iter().map(|t| t.id.as_str()).collect();
                ids.sort_unstable();
                if ids.windows(2).any(|w| w[0] == w[1]) {
                    return bad("data.files.tasks has duplicate ids".into());
                }
            }
        }
        if self.selection.as_ref().is_some_and(|s| s.num_selected == Some(0)) {
            return bad("selection.num_selected must be at least 1".into());
        }
        if self.model.hidden == 0 {
            return bad("model.hidden must be at least 1".into());
        }
        let n_tasks = match &self.data {
            DataConfig::Synthetic(s) => s.n_tasks,
            DataConfig::Files(f) => f.tasks.len(),
        };
        self.train.validate(n_tasks)?;
        let h = &self.holdout;
        if !(0.0..=1.0).contains(&h.fraction) {
            return bad(format!("holdout.fraction = {} outside [0, 1]", h.fraction));
        }
        if !(h.candidate_strength > 0.0 && h.candidate_strength <= 1.0) {
            return bad(format!(
                "holdout.candidate_strength = {} outside (0, 1]",
                h.candidate_strength
            ));
        }
        let sources = [h.fraction > 0.0, h.planted, h.edges.is_some()];
        if sources.iter().filter(|&&s| s).count() > 1 {
            return bad("holdout: use only one of fraction, planted and edges".into());
        }
        if h.planted && !matches!(self.data, DataConfig::Synthetic(_)) {
            return bad("holdout.planted needs synthetic data".into());
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split fractions {:?} must lie in [0, 1] and sum to 1",
                self.split
            ));
        }
        if self.split[0] == 0.0 {
            return bad("split needs a nonzero train fraction".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of this config with `out_dir`
    /// removed, so relocating the output does not change the digest.
    pub fn digest(&self) -> Result<String> {
        let canonical = RunConfig {
            out_dir: None,
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }
}

/// Directory relative data paths are resolved against.
pub fn base_dir(config_path: Option<&Path>) -> PathBuf {
    config_path
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default()
}
