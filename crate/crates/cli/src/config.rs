//! Run configuration file.
//!
//! ```toml
//! seed = 7
//! network = "feeder.net"
//! train_scenarios = "scenarios/train.csv"
//! test_scenarios = ["scenarios/test_1.csv"]
//! variant = "ph"
//! out = "runs/ph"
//!
//! [env]
//! horizon = 8
//! k = 2
//! ph_refresh = "per_episode"
//!
//! [model]
//! hidden = [32, 32]
//!
//! [train]
//! total_steps = 50000
//! ```
//!
//! Relative paths resolve against the config file's directory. Missing
//! sections fall back to defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gridrl_core::{EnvConfig, GcapcnConfig, TrainConfig, Variant};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub network: PathBuf,
    pub train_scenarios: PathBuf,
    #[serde(default)]
    pub test_scenarios: Vec<PathBuf>,
    #[serde(default)]
    pub variant: Variant,
    pub out: Option<PathBuf>,
    /// Precomputed edge weights to preload.
    pub ph_cache: Option<PathBuf>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub model: GcapcnConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.network);
        resolve(&mut cfg.train_scenarios);
        cfg.test_scenarios.iter_mut().for_each(resolve);
        if let Some(p) = cfg.out.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.ph_cache.as_mut() {
            resolve(p);
        }
        // the run seed drives every stream
        cfg.train.seed = cfg.seed;
        cfg.check_files()?;
        Ok(cfg)
    }

    fn check_files(&self) -> Result<()> {
        let mut files = vec![&self.network, &self.train_scenarios];
        files.extend(&self.test_scenarios);
        files.extend(self.ph_cache.as_ref());
        for f in files {
            if !f.is_file() {
                bail!("config refers to missing file {}", f.display());
            }
        }
        Ok(())
    }
}
