//! Experiment configuration: JSON file, command-line overrides, validation.

use std::path::{Path, PathBuf};

use fedsim::packaging::DType;
use fedsim::protocol::{AsyncConfig, Compression, SchedulerMode, WireFormat};
use fedsim::trainer::{ModelKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Standalone,
    Simulate,
    Server,
    Client,
    Scheduler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Logistic,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    /// Directory with the four MNIST IDX files (`kind = "idx"`).
    pub dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            n: 2000,
            dim: 20,
            classes: 2,
            separation: 3.0,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Iid,
    Shard,
    Dirichlet,
    Quantity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: Scheme,
    pub num_shards: Option<usize>,
    pub shards_per_client: usize,
    pub shard_size: Option<usize>,
    pub beta: Option<f64>,
    pub min_size: usize,
    /// Precomputed partition JSON; overrides `scheme`.
    pub file: Option<PathBuf>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Iid,
            num_shards: None,
            shards_per_client: 2,
            shard_size: None,
            beta: None,
            min_size: 1,
            file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AsyncFlags {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: AsyncConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    pub groups: u32,
    pub mode: SchedulerMode,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            mode: SchedulerMode::MiddleAggregate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Server address (`host:port`). The server listens on it; clients and
    /// schedulers dial it.
    pub address: Option<String>,
    /// Number of ranks including the server; defaults to `num_clients + 1`.
    pub world_size: Option<usize>,
    pub rank: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerNetConfig {
    pub group_id: u32,
    /// Address the scheduler listens on for its group.
    pub listen: Option<String>,
    /// Client ranks served by this scheduler.
    pub downstream: Vec<u32>,
    pub mode: Option<SchedulerMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub rounds: u32,
    pub num_clients: usize,
    pub sample_fraction: f64,
    pub train: TrainConfig,
    pub dtype: DType,
    pub compression: Compression,
    #[serde(rename = "async")]
    pub async_mode: AsyncFlags,
    pub hierarchy: Option<HierarchyConfig>,
    pub seed: u64,
    pub metrics_out: Option<PathBuf>,
    /// When false the wall_ms column is written as 0, making metrics files
    /// reproducible byte for byte.
    pub record_wall_time: bool,
    pub network: NetworkConfig,
    pub scheduler: SchedulerNetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Standalone,
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            rounds: 10,
            num_clients: 10,
            sample_fraction: 1.0,
            train: TrainConfig::default(),
            dtype: DType::F64,
            compression: Compression::None,
            async_mode: AsyncFlags::default(),
            hierarchy: None,
            seed: 0,
            metrics_out: None,
            record_wall_time: true,
            network: NetworkConfig::default(),
            scheduler: SchedulerNetConfig::default(),
        }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn wire_format(&self) -> WireFormat {
        WireFormat {
            dtype: self.dtype,
            compression: self.compression,
        }
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn world_size(&self) -> usize {
        self.network.world_size.unwrap_or(self.num_clients + 1)
    }

    fn address(&self) -> Result<&str, CliError> {
        self.network
            .address
            .as_deref()
            .filter(|a| !a.is_empty())
            .ok_or_else(|| invalid("network.address", "required in this mode"))
    }

    pub fn server_address(&self) -> Result<&str, CliError> {
        self.address()
    }

    pub fn rank(&self) -> Result<u32, CliError> {
        self.network
            .rank
            .ok_or_else(|| invalid("network.rank", "required in this mode"))
    }

    /// Checks every field the selected mode depends on.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.num_clients == 0 {
            return Err(invalid("num_clients", "must be at least 1"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(invalid("sample_fraction", format!("{} outside (0, 1]", self.sample_fraction)));
        }
        self.train
            .validate()
            .map_err(|e| invalid("train", e))?;
        self.compression.validate().map_err(|e| invalid("compression", e))?;
        if self.model.kind == ModelKind::Mlp1 && self.model.hidden == 0 {
            return Err(invalid("model.hidden", "must be positive"));
        }
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                let d = &self.dataset;
                if d.dim == 0 || d.classes < 2 || d.n < d.classes {
                    return Err(invalid("dataset", "need dim >= 1, classes >= 2, n >= classes"));
                }
                if !(d.separation >= 0.0 && d.separation.is_finite()) {
                    return Err(invalid("dataset.separation", "must be finite and non-negative"));
                }
            }
            DatasetKind::Idx => {
                if self.dataset.dir.is_none() {
                    return Err(invalid("dataset.dir", "required for idx datasets"));
                }
            }
        }
        if self.partition.file.is_none() {
            match self.partition.scheme {
                Scheme::Iid => {}
                Scheme::Shard => {
                    if self.partition.num_shards.is_none() {
                        return Err(invalid("partition.num_shards", "required for the shard scheme"));
                    }
                }
                Scheme::Dirichlet | Scheme::Quantity => match self.partition.beta {
                    Some(b) if b > 0.0 && b.is_finite() => {}
                    Some(b) => return Err(invalid("partition.beta", format!("{b} must be positive"))),
                    None => return Err(invalid("partition.beta", "required for this scheme")),
                },
            }
        }
        let a = &self.async_mode.params;
        if !(0.0..=1.0).contains(&a.alpha) {
            return Err(invalid("async.alpha", format!("{} outside [0, 1]", a.alpha)));
        }
        if !(a.staleness_exponent >= 0.0 && a.staleness_exponent.is_finite()) {
            return Err(invalid("async.staleness_exponent", "must be finite and non-negative"));
        }
        if let Some(h) = &self.hierarchy {
            if h.groups == 0 || h.groups as usize > self.num_clients {
                return Err(invalid("hierarchy.groups", "must be between 1 and num_clients"));
            }
        }
        match self.mode {
            Mode::Standalone => {
                if self.async_mode.enabled {
                    return Err(invalid("async.enabled", "standalone mode is synchronous; use simulate"));
                }
                if self.hierarchy.is_some() {
                    return Err(invalid("hierarchy", "standalone mode is flat; use simulate"));
                }
            }
            Mode::Simulate => {
                if self.async_mode.enabled && self.hierarchy.is_some() {
                    return Err(invalid("hierarchy", "not supported with async"));
                }
            }
            Mode::Server => {
                self.address()?;
                if self.world_size() < 2 {
                    return Err(invalid("network.world_size", "need at least one client"));
                }
            }
            Mode::Client => {
                self.address()?;
                let rank = self.rank()?;
                if rank == 0 || rank as usize > self.num_clients {
                    return Err(invalid("network.rank", format!("{rank} outside 1..={}", self.num_clients)));
                }
            }
            Mode::Scheduler => {
                self.address()?;
                self.rank()?;
                if self.scheduler.listen.as_deref().is_none_or(str::is_empty) {
                    return Err(invalid("scheduler.listen", "required in scheduler mode"));
                }
                if self.scheduler.downstream.is_empty() {
                    return Err(invalid("scheduler.downstream", "required in scheduler mode"));
                }
                if self.scheduler.mode.is_none() {
                    return Err(invalid("scheduler.mode", "required in scheduler mode"));
                }
                if let Some(&r) = self
                    .scheduler
                    .downstream
                    .iter()
                    .find(|&&r| r == 0 || r as usize > self.num_clients)
                {
                    return Err(invalid("scheduler.downstream", format!("rank {r} is not a client rank")));
                }
            }
        }
        Ok(())
    }
}

/// Parses `none`, `f16`, or `topk:<fraction>`.
pub fn parse_compression(s: &str) -> Result<Compression, String> {
    match s {
        "none" => Ok(Compression::None),
        "f16" => Ok(Compression::F16),
        _ => {
            let frac = s
                .strip_prefix("topk:")
                .ok_or_else(|| format!("unknown compression {s:?}; expected none, f16 or topk:<fraction>"))?;
            let fraction: f64 = frac.parse().map_err(|e| format!("top-k fraction {frac:?}: {e}"))?;
            Ok(Compression::TopK { fraction })
        }
    }
}
