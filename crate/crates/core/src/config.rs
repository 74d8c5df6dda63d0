//! Versioned TOML configuration shared by the command-line tool.
//!
//! ```toml
//! schema_version = 1
//! seed = 0
//!
//! [network]      # NetworkSpec, including [network.routing] and [[network.layers]]
//! [train]        # TrainConfig
//! [data]         # DataConfig
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_mnist, synth_affine_glyphs, Dataset, Split};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::rng::derive_seed;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Keys whose defaults are choices of this implementation rather than values taken
/// from the method's description, as `table.key` (array tables without index).
pub const NON_PAPER_DEFAULTS: &[&str] = &[
    "seed",
    "network.method",
    "network.routing.alpha",
    "network.routing.variance_floor",
    "network.routing.kernel.profile",
    "network.routing.kernel.metric",
    "network.layers.kernel",
    "network.layers.channels",
    "train.optimizer",
    "train.learning_rate",
    "train.momentum",
    "train.threads",
    "train.init.weight_stddev",
    "train.init.weights",
    "data.dataset",
    "data.dir",
    "data.train_size",
    "data.test_size",
    "data.synth_classes",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Synth,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "synth" => Ok(DatasetKind::Synth),
            other => Err(Error::InvalidConfig(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding the MNIST-format IDX files.
    pub dir: String,
    pub train_size: usize,
    pub test_size: usize,
    /// Class count of the synthetic glyph set.
    pub synth_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            dir: "data/mnist".into(),
            train_size: 5000,
            test_size: 1000,
            synth_classes: 5,
        }
    }
}

impl DataConfig {
    /// Loads and preprocesses the train and test splits. Synthetic splits are
    /// generated from independent streams of `seed`.
    pub fn load(&self, seed: u64, input_size: usize) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.dataset {
            DatasetKind::Mnist => (
                load_mnist(&self.dir, Split::Train)?.take(self.train_size)?,
                load_mnist(&self.dir, Split::Test)?.take(self.test_size)?,
            ),
            DatasetKind::Synth => {
                let k = self.synth_classes;
                if k == 0 || self.train_size < k || self.test_size < k {
                    return Err(Error::InvalidConfig(
                        "synthetic splits need at least one image per class".into(),
                    ));
                }
                // Labels are shuffled, so truncating a whole-class set keeps it balanced.
                let split = |size: usize, name, kind| {
                    synth_affine_glyphs(k, size.div_ceil(k), derive_seed(seed, name), kind)?.take(size)
                };
                (
                    split(self.train_size, "data.train", Split::Train)?,
                    split(self.test_size, "data.test", Split::Test)?,
                )
            }
        };
        Ok((train.preprocessed(input_size)?, test.preprocessed(input_size)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    /// Root of every random stream.
    pub seed: u64,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            network: NetworkSpec::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Training settings with the seed taken from the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.layout()?;
        self.train.validate()
    }
}

/// The default configuration as TOML, with every non-paper default marked by a
/// trailing `# non-paper default` comment.
pub fn print_defaults() -> String {
    annotate(&Config::default().to_toml())
}

fn annotate(text: &str) -> String {
    let mut table = String::new();
    let mut out = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(header) = trimmed.strip_prefix('[') {
            table = header.trim_matches(|c| c == '[' || c == ']').to_string();
        }
        let key = trimmed.split_once(" = ").map(|(k, _)| k.trim());
        let path = match key {
            Some(k) if table.is_empty() => k.to_string(),
            Some(k) => format!("{table}.{k}"),
            None => String::new(),
        };
        out.push_str(line);
        if key.is_some() && NON_PAPER_DEFAULTS.contains(&path.as_str()) {
            out.push_str("  # non-paper default");
        }
        out.push('\n');
    }
    let mut header = String::new();
    let _ = writeln!(header, "# capsroute configuration (schema_version {SCHEMA_VERSION})");
    header + &out
}
