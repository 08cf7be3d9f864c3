use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use imn_core::dataset::{DatasetConfig, SplitFractions};
use imn_core::model::ModelConfig;
use imn_core::training::{parse_lambdas, TrainConfig};

pub const DEFAULT_CONFIG: &str = include_str!("default_config.toml");

/// Keys that are owned by a top-level setting.
const RESERVED: [(&str, &str, &str); 3] = [
    ("dataset", "master_seed", "seed"),
    ("train", "seed", "seed"),
    ("train", "lambdas", "lambdas"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub lambdas: String,
    pub bench_repetitions: usize,
    pub dataset: DatasetConfig,
    pub split: SplitFractions,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DatasetConfig::default().master_seed,
            out_dir: PathBuf::from("runs"),
            lambdas: "equal".into(),
            bench_repetitions: 3,
            dataset: DatasetConfig::default(),
            split: SplitFractions::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Error in the configuration rather than in the data or the numerics.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambdas: Option<String>,
    pub n_per_config: Option<usize>,
    pub epochs: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> anyhow::Result<RunConfig> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError(format!("{origin}: {e}")))?;
        for (section, key, owner) in RESERVED {
            if table
                .get(section)
                .and_then(|s| s.as_table())
                .is_some_and(|s| s.contains_key(key))
            {
                bail!(ConfigError(format!(
                    "{origin}: `{section}.{key}` is set through the top-level `{owner}` key"
                )));
            }
        }
        toml::from_str(text).map_err(|e| ConfigError(format!("{origin}: {e}")).into())
    }

    /// Defaults, then the file (if any), then command-line overrides; validated.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))
                    .map_err(|e| ConfigError(format!("{e:#}")))?;
                RunConfig::parse(&text, &p.display().to_string())?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(l) = &overrides.lambdas {
            cfg.lambdas = l.clone();
        }
        if let Some(n) = overrides.n_per_config {
            cfg.dataset.n_per_config = n;
        }
        if let Some(e) = overrides.epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(o) = &overrides.out_dir {
            cfg.out_dir = o.clone();
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Push the top-level seed and weights into the sub-configs and validate them.
    pub fn resolve(&mut self) -> anyhow::Result<()> {
        let cfg_err = |e: imn_core::Error| ConfigError(e.to_string());
        self.dataset.master_seed = self.seed;
        self.train.seed = self.seed;
        self.train.lambdas = parse_lambdas(&self.lambdas).map_err(cfg_err)?;
        self.dataset.validate().map_err(cfg_err)?;
        self.split.validate().map_err(cfg_err)?;
        self.model.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        if self.bench_repetitions < 3 {
            bail!(ConfigError("bench_repetitions must be at least 3".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}
