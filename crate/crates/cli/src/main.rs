use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsim::packaging::DType;
use fedsim::protocol::SchedulerMode;
use fedsim_cli::commands::{inspect_cmd, partition_cmd};
use fedsim_cli::config::{parse_compression, ExperimentConfig, HierarchyConfig, Mode};
use fedsim_cli::{run, CliError};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run an experiment in one of the five modes.
    Run {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write the configured partition as JSON.
    Partition {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a partition file.
    Inspect {
        path: PathBuf,
        /// Config whose dataset supplies labels for per-client histograms.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(format!("unknown dtype {s:?}; expected f32 or f64")),
    }
}

fn parse_scheduler_mode(s: &str) -> Result<SchedulerMode, String> {
    match s {
        "forward" => Ok(SchedulerMode::Forward),
        "middle-aggregate" => Ok(SchedulerMode::MiddleAggregate),
        _ => Err(format!("unknown scheduler mode {s:?}; expected forward or middle-aggregate")),
    }
}

/// Flags take precedence over the config file, which takes precedence over
/// built-in defaults.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    num_clients: Option<usize>,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Server address, `host:port`.
    #[arg(long)]
    address: Option<String>,
    #[arg(long)]
    rank: Option<u32>,
    #[arg(long)]
    world_size: Option<usize>,
    /// `none`, `f16` or `topk:<fraction>`.
    #[arg(long, value_parser = parse_compression)]
    compression: Option<fedsim::protocol::Compression>,
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<DType>,
    #[arg(long = "async")]
    async_mode: bool,
    #[arg(long)]
    listen: Option<String>,
    /// Comma-separated client ranks behind this scheduler.
    #[arg(long, value_delimiter = ',')]
    downstream: Option<Vec<u32>>,
    #[arg(long)]
    group_id: Option<u32>,
    /// `forward` or `middle-aggregate`; applies to the scheduler role and
    /// to simulated hierarchies.
    #[arg(long, value_parser = parse_scheduler_mode)]
    scheduler_mode: Option<SchedulerMode>,
    /// Simulate a hierarchy with this many schedulers.
    #[arg(long)]
    groups: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl Overrides {
    fn apply(self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag {
                    c.$($field).+ = v;
                }
            };
        }
        set!(mode => mode);
        set!(rounds => rounds);
        set!(num_clients => num_clients);
        set!(sample_fraction => sample_fraction);
        set!(seed => seed);
        set!(compression => compression);
        set!(dtype => dtype);
        set!(downstream => scheduler.downstream);
        set!(group_id => scheduler.group_id);
        set!(lr => train.lr);
        set!(epochs => train.epochs);
        set!(batch_size => train.batch_size);
        if self.metrics_out.is_some() {
            c.metrics_out = self.metrics_out;
        }
        if self.address.is_some() {
            c.network.address = self.address;
        }
        if self.rank.is_some() {
            c.network.rank = self.rank;
        }
        if self.world_size.is_some() {
            c.network.world_size = self.world_size;
        }
        if self.listen.is_some() {
            c.scheduler.listen = self.listen;
        }
        if self.async_mode {
            c.async_mode.enabled = true;
        }
        if let Some(groups) = self.groups {
            c.hierarchy.get_or_insert_with(HierarchyConfig::default).groups = groups;
        }
        if let Some(m) = self.scheduler_mode {
            c.scheduler.mode = Some(m);
            if let Some(h) = c.hierarchy.as_mut() {
                h.mode = m;
            }
        }
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { overrides } => overrides.apply().and_then(|cfg| run::run(&cfg)),
        Command::Partition { config, out } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p),
                None => Ok(ExperimentConfig::default()),
            };
            cfg.and_then(|cfg| partition_cmd(&cfg, &out)).map(|map| {
                println!("wrote {} clients to {}", map.num_clients(), out.display());
            })
        }
        Command::Inspect { path, config } => config
            .map(|p| ExperimentConfig::load(&p))
            .transpose()
            .and_then(|cfg| inspect_cmd(&path, cfg.as_ref()))
            .map(|report| print!("{report}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
