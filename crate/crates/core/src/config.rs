//! Global configuration, loaded from a TOML file and/or startup flags.
//!
//! ```toml
//! workers = 2
//! ranks_per_node = 2
//! time_mode = "virtual"
//! backend = "loopback"
//! eager_threshold = 8192
//!
//! [ranks]
//! 0 = "127.0.0.1:7100"
//! 1 = "127.0.0.1:7101"
//!
//! [link.intra]
//! latency_us = 1.0
//! bandwidth_gbps = 50.0
//!
//! [link.inter]
//! latency_us = 2.0
//! bandwidth_gbps = 12.5
//!
//! [device]
//! h2d_latency_us = 5.0
//! bandwidth_gbps = 10.0
//!
//! [tags]
//! pe_bits = 32
//! counter_bits = 28
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::CopyCostModel;
use crate::tag::TagLayout;
use crate::time::{LinkModel, LinkScope, TimeMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Loopback,
    Tcp,
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loopback" => Ok(Backend::Loopback),
            "tcp" => Ok(Backend::Tcp),
            other => Err(format!("unknown backend '{other}' (expected loopback|tcp)")),
        }
    }
}

/// Order in which the messaging API issues a device payload and its
/// metadata envelope. Only tests have a reason to change it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadOrder {
    #[default]
    PayloadFirst,
    MetadataFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    pub latency_us: f64,
    pub bandwidth_gbps: f64,
}

impl LinkParams {
    pub fn model(&self) -> LinkModel {
        LinkModel::new(self.latency_us, self.bandwidth_gbps * 1e9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub intra: LinkParams,
    pub inter: LinkParams,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            intra: LinkParams {
                latency_us: 1.0,
                bandwidth_gbps: 50.0,
            },
            inter: LinkParams {
                latency_us: 2.0,
                bandwidth_gbps: 12.5,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    /// Sets both copy latencies unless a direction-specific key is given.
    pub latency_us: Option<f64>,
    pub h2d_latency_us: Option<f64>,
    pub d2h_latency_us: Option<f64>,
    /// Sets both copy bandwidths unless a direction-specific key is given.
    pub bandwidth_gbps: Option<f64>,
    pub h2d_bandwidth_gbps: Option<f64>,
    pub d2h_bandwidth_gbps: Option<f64>,
    pub capacity_bytes: Option<u64>,
}

impl DeviceConfig {
    pub fn cost_model(&self) -> CopyCostModel {
        let d = CopyCostModel::default();
        let lat = self.latency_us;
        let bw = self.bandwidth_gbps.map(|g| g * 1e9);
        CopyCostModel::new(
            self.h2d_latency_us.or(lat).unwrap_or(d.h2d_latency_us()),
            self.d2h_latency_us.or(lat).unwrap_or(d.d2h_latency_us()),
            self.h2d_bandwidth_gbps.map(|g| g * 1e9).or(bw).unwrap_or(d.h2d_bandwidth),
            self.d2h_bandwidth_gbps.map(|g| g * 1e9).or(bw).unwrap_or(d.d2h_bandwidth),
        )
    }

    pub fn capacity(&self) -> u64 {
        self.capacity_bytes.unwrap_or(crate::device::DEFAULT_CAPACITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Number of PEs (one worker each).
    pub workers: usize,
    pub ranks_per_node: usize,
    pub time_mode: TimeMode,
    pub backend: Backend,
    pub eager_threshold: usize,
    pub eager_prepost: usize,
    pub max_message_size: u64,
    pub connect_timeout_ms: u64,
    /// rank -> "host:port" for the TCP backend. Missing ranks bind an
    /// ephemeral localhost port.
    pub ranks: BTreeMap<String, String>,
    pub link: LinkConfig,
    pub device: DeviceConfig,
    pub tags: TagLayout,
    pub payload_order: PayloadOrder,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            workers: 1,
            ranks_per_node: usize::MAX,
            time_mode: TimeMode::Wall,
            backend: Backend::Loopback,
            eager_threshold: 8192,
            eager_prepost: 64,
            max_message_size: 1 << 30,
            connect_timeout_ms: 5000,
            ranks: BTreeMap::new(),
            link: LinkConfig::default(),
            device: DeviceConfig::default(),
            tags: TagLayout::default(),
            payload_order: PayloadOrder::PayloadFirst,
            seed: 0,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_time_mode(mut self, mode: TimeMode) -> Self {
        self.time_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.ranks_per_node == 0 {
            return Err(ConfigError::Invalid("ranks_per_node must be at least 1".into()));
        }
        self.tags
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, p) in [("intra", self.link.intra), ("inter", self.link.inter)] {
            if !(p.latency_us >= 0.0) || !(p.bandwidth_gbps > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "link.{name}: latency must be >= 0 and bandwidth > 0"
                )));
            }
        }
        let m = self.device.cost_model();
        if !(m.h2d_bandwidth > 0.0 && m.d2h_bandwidth > 0.0) {
            return Err(ConfigError::Invalid("device bandwidth must be > 0".into()));
        }
        if self.backend == Backend::Tcp && self.time_mode == TimeMode::Virtual {
            // The TCP frame format has no timestamp field.
            return Err(ConfigError::Invalid(
                "virtual time requires the loopback backend".into(),
            ));
        }
        for key in self.ranks.keys() {
            key.parse::<u32>()
                .map_err(|_| ConfigError::Invalid(format!("rank key '{key}' is not an integer")))?;
        }
        Ok(())
    }

    pub fn node_of(&self, pe: u32) -> usize {
        pe as usize / self.ranks_per_node
    }

    pub fn link_scope(&self, a: u32, b: u32) -> LinkScope {
        if self.node_of(a) == self.node_of(b) {
            LinkScope::IntraNode
        } else {
            LinkScope::InterNode
        }
    }

    pub fn link_model(&self, a: u32, b: u32) -> LinkModel {
        match self.link_scope(a, b) {
            LinkScope::IntraNode => self.link.intra.model(),
            LinkScope::InterNode => self.link.inter.model(),
        }
    }

    pub fn rank_address(&self, rank: u32) -> Option<&str> {
        self.ranks.get(&rank.to_string()).map(String::as_str)
    }
}
