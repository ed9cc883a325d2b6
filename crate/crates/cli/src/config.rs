//! Run configuration: one TOML file drives every subcommand. A single
//! top-level seed governs the whole run; the dataset and search stages each
//! derive their randomness from it, so any per-stage seeds appearing in the
//! file are overwritten during resolution.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use slicetune_core::datagen::GenConfig;
use slicetune_core::optimizer::SearchConfig;
use std::path::{Path, PathBuf};

/// Workspace-relative locations of the run's artifacts. Absolute paths are
/// honored as given.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub ledger: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: PathBuf::from("dataset"),
            ledger: PathBuf::from("ledger.tsv"),
            models: PathBuf::from("models"),
            reports: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Localization cutoff; must lie strictly between 0.25 and 1.
    pub cutoff: f64,
    /// How many test volumes are concatenated into the localization track.
    pub localize_volumes: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            cutoff: 0.7,
            localize_volumes: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; `dataset.seed` and `search.seed` follow it.
    pub seed: u64,
    /// Ensemble size: how many of the best trials the report combines.
    pub k: usize,
    pub paths: Paths,
    pub dataset: GenConfig,
    pub search: SearchConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            k: 10,
            paths: Paths::default(),
            dataset: GenConfig::default(),
            search: SearchConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub random_iters: Option<u64>,
    pub adaptive_iters: Option<u64>,
}

impl RunConfig {
    /// Reads `--config` if given, else `<workspace>/config.toml` if present,
    /// else the defaults. Flag overrides are applied, then the master seed is
    /// propagated and the result validated.
    pub fn load(
        explicit: Option<&Path>,
        workspace: &Path,
        overrides: &Overrides,
    ) -> Result<RunConfig> {
        let mut cfg = match explicit {
            Some(path) => Self::from_file(path)?,
            None => {
                let default_path = workspace.join("config.toml");
                if default_path.is_file() {
                    Self::from_file(&default_path)?
                } else {
                    RunConfig::default()
                }
            }
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(k) = overrides.k {
            cfg.k = k;
        }
        if let Some(n) = overrides.random_iters {
            cfg.search.random_iters = n;
        }
        if let Some(n) = overrides.adaptive_iters {
            cfg.search.adaptive_iters = n;
        }
        cfg.dataset.seed = cfg.seed;
        cfg.search.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            bail!("k must be at least 1, got {}", self.k);
        }
        if !(self.report.cutoff > 0.25 && self.report.cutoff < 1.0) {
            bail!(
                "report cutoff must lie strictly between 0.25 and 1, got {}",
                self.report.cutoff
            );
        }
        if self.report.localize_volumes < 1 {
            bail!("report needs at least one volume to localize");
        }
        Ok(())
    }
}
