//! Command-line harness for the variance-partitioning disease-mapping
//! model: configuration, data ingestion, the simulation study and report
//! files.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod scenario;

use std::path::{Path, PathBuf};

use vpmap_core::inference::McmcConfig;

pub use config::{Command, RunConfig};
pub use error::{CliError, CliResult, ExitKind};

/// A loaded config plus the command-line overrides.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: RunConfig,
    pub config_text: String,
    /// Directory that relative paths in the config are resolved against.
    pub base_dir: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Invocation {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, base_dir)
    }

    pub fn from_text(text: &str, base_dir: PathBuf) -> CliResult<Self> {
        Ok(Self {
            config: RunConfig::from_json(text)?,
            config_text: text.to_string(),
            base_dir,
            seed: None,
            jobs: None,
            out: None,
        })
    }

    pub fn with_overrides(mut self, seed: Option<u64>, jobs: Option<usize>, out: Option<PathBuf>) -> Self {
        self.seed = seed;
        self.jobs = jobs;
        self.out = out;
        self
    }

    /// The `mcmc` section with `--seed` and `--jobs` applied.
    pub fn mcmc_config(&self, cmd: Command) -> CliResult<McmcConfig> {
        let mut cfg = self.config.mcmc_section(cmd)?.clone();
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.validate().map_err(error::as_config)?;
        Ok(cfg)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.config.output_dir(self.out.as_deref(), &self.base_dir)
    }

    pub fn manifest(&self, cmd: Command, seed: Option<u64>, jobs: usize) -> output::Manifest {
        let value = serde_json::to_value(&self.config).unwrap_or(serde_json::Value::Null);
        output::Manifest::new(cmd.name(), seed, jobs, &self.config_text, value)
    }

    /// Validates the config for `cmd` and runs it.
    pub fn run(&self, cmd: Command) -> CliResult<()> {
        if self.jobs == Some(0) {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        self.config.validate(cmd)?;
        match cmd {
            Command::Fit => commands::fit::run(self).map(|_| ()),
            Command::Simulate => commands::simulate::run(self).map(|_| ()),
            Command::VerifyPrior => commands::verify::run(self).map(|_| ()),
            Command::Scale => commands::scale::run(self).map(|_| ()),
        }
    }
}
