use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::AdapterSpec;
use crate::training::TrainConfig;

/// The arms the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Per-task adapters, dual prototypes, two-step prediction.
    Dpta,
    /// Raw prototypes and nearest-class-mean, no adaption.
    SimpleCil,
    /// One adapter trained on the first task with the center-adapt loss,
    /// used for every class.
    AdapterCa,
    /// As `AdapterCa` with plain cross-entropy (`λ = 0`).
    AdapterEa,
    /// Whole backbone fine-tuned task by task with a growing linear head.
    Finetune,
    /// Counts a sample correct whenever its label is in the raw top-K.
    TopkOracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Dpta,
        Method::SimpleCil,
        Method::AdapterCa,
        Method::AdapterEa,
        Method::Finetune,
        Method::TopkOracle,
    ];

    /// Arms of the ablation suite, in table order.
    pub const ABLATION: [Method; 5] = [
        Method::Dpta,
        Method::AdapterCa,
        Method::AdapterEa,
        Method::SimpleCil,
        Method::TopkOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpta => "dpta",
            Method::SimpleCil => "simple-cil",
            Method::AdapterCa => "adapter-ca",
            Method::AdapterEa => "adapter-ea",
            Method::Finetune => "finetune",
            Method::TopkOracle => "topk-oracle",
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
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Hidden widths and feature width of the backbone; the input width comes
/// from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            feature_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        dims
    }
}

/// Precomputed features loaded from a CSV and split B/Base-m, Inc-n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default)]
    pub base_m: usize,
    pub inc_n: usize,
    #[serde(default)]
    pub pretrain_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    1.0 / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Size of the raw-prototype shortlist.
    pub k: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub adapter: AdapterSpec,
    /// Adaption (and fine-tuning) optimization.
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub synthetic: SyntheticSpec,
    /// When present, replaces the synthetic benchmark.
    pub csv: Option<CsvSource>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Dpta,
            k: 5,
            seed: 1993,
            out_dir: PathBuf::from("results"),
            model: ModelConfig::default(),
            adapter: AdapterSpec::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig::default(),
            synthetic: SyntheticSpec::default(),
            csv: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Relative CSV paths are relative to the config file.
        if let (Some(csv), Some(dir)) = (cfg.csv.as_mut(), path.parent()) {
            if csv.path.is_relative() {
                csv.path = dir.join(&csv.path);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.train.validate()?;
        self.pretrain.validate()?;
        if self.csv.is_none() {
            self.synthetic.validate()?;
        }
        Ok(())
    }

    /// The configuration an arm actually runs with: Adapter-EA zeroes the
    /// center-loss weight; everything else is unchanged.
    pub fn effective(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.method == Method::AdapterEa {
            cfg.train.lambda = 0.0;
        }
        cfg
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }
}
