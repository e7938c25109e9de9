//! `partition` and `inspect` subcommands.

use std::path::Path;

use fedsim::partition::{partition_report, PartitionMap};

use crate::config::ExperimentConfig;
use crate::run::{build_partition, load_data};
use crate::CliError;

/// Builds the partition described by `cfg` and writes it as JSON to `out`.
pub fn partition_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<PartitionMap, CliError> {
    cfg.validate()?;
    let (train, _) = load_data(cfg)?;
    let map = build_partition(cfg, &train)?;
    std::fs::write(out, map.to_json())?;
    Ok(map)
}

/// Human-readable summary of a partition file. With a config the report
/// includes per-client label histograms from the configured dataset.
pub fn inspect_cmd(path: &Path, cfg: Option<&ExperimentConfig>) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let map = PartitionMap::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if let Some(cfg) = cfg {
        let (train, _) = load_data(cfg)?;
        return Ok(partition_report(&map, train.labels()).to_string());
    }
    let sizes = map.sizes();
    let mut out = format!(
        "{} clients, {} samples assigned\n{:>6} {:>8}\n",
        sizes.len(),
        sizes.iter().sum::<usize>(),
        "client",
        "size"
    );
    for (i, s) in sizes.iter().enumerate() {
        out.push_str(&format!("{i:>6} {s:>8}\n"));
    }
    Ok(out)
}
