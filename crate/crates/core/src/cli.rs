//! Startup flags shared by the command-line tools.

use std::path::PathBuf;

use crate::config::{Config, ConfigError};
use crate::time::TimeMode;

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Number of PEs; overrides the config file.
    #[arg(long)]
    pub pes: Option<usize>,
    /// PEs per simulated node; pairs on different nodes use the inter-node link.
    #[arg(long)]
    pub ranks_per_node: Option<usize>,
    /// TOML runtime configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Clock used for reported times.
    #[arg(long, value_parser = parse_time_mode)]
    pub time_mode: Option<TimeMode>,
    /// Seed for payload patterns.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_time_mode(s: &str) -> Result<TimeMode, String> {
    s.parse()
}

impl CommonArgs {
    /// Builds the runtime configuration: file (or defaults), then flags.
    pub fn config(&self, default_pes: usize) -> Result<Config, ConfigError> {
        let mut c = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default().with_workers(default_pes),
        };
        if let Some(n) = self.pes {
            c.workers = n;
        }
        if let Some(n) = self.ranks_per_node {
            c.ranks_per_node = n;
        }
        if let Some(m) = self.time_mode {
            c.time_mode = m;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}
