//! Scenario runners. Client `i` (0-based, owning partition entry `i`) is rank
//! `i + 1`; the server is rank 0; in simulated hierarchies scheduler `g`
//! takes rank `num_clients + 1 + g` on the server's segment.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use fedsim::aggregate::{fedavg, sample_clients, ClientUpdate};
use fedsim::data::{load_mnist_dir, synth_train_test, Dataset};
use fedsim::packaging::{MessageCode, ModelParameters};
use fedsim::partition::{
    dirichlet_label_partition, iid_partition, quantity_skew_partition, shard_partition, PartitionMap,
    ShardSpec, DEFAULT_MAX_RETRIES,
};
use fedsim::protocol::actors::{AsyncClientActor, SchedulerActor, SyncClientActor};
use fedsim::protocol::{
    async_client_loop, model_package, read_model, read_update, scheduler_run, sync_client_loop,
    sync_server_round, update_package, wire_view, AsyncClient, AsyncServer, RankMap, Scheduler,
    SchedulerConfig, SchedulerMode, SyncClient, SyncServer,
};
use fedsim::rng::{stream, Rng};
use fedsim::trainer::{evaluate, local_train, LocalTrainer, ModelKind, ModelSpec};
use fedsim::transport::sim::SimNet;
use fedsim::transport::tcp::{RetryPolicy, TcpClientTransport, TcpServerTransport};
use fedsim::transport::{Transport, TransportError};

use crate::config::{DatasetKind, ExperimentConfig, HierarchyConfig, Mode, Scheme};
use crate::metrics::{to_csv, write_csv, MetricsRow};
use crate::CliError;

/// Everything a role needs, derived deterministically from the config.
pub struct Prepared {
    pub spec: ModelSpec,
    pub train: Arc<Dataset>,
    pub test: Dataset,
    pub partition: PartitionMap,
    pub init: ModelParameters,
}

impl Prepared {
    fn trainer(&self, cfg: &ExperimentConfig, id: u32) -> Result<LocalTrainer, CliError> {
        let indices = self
            .partition
            .client(id)
            .ok_or_else(|| CliError::Data(format!("partition has no client {id}")))?;
        Ok(LocalTrainer {
            spec: self.spec,
            data: self.train.clone(),
            indices: indices.to_vec(),
            cfg: cfg.train_config(),
            client_id: id,
        })
    }
}

/// Result of an in-process run: the CSV rows and the global model after
/// each row.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    pub trajectory: Vec<ModelParameters>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let d = &cfg.dataset;
    Ok(match d.kind {
        DatasetKind::Synthetic => synth_train_test(d.n, d.dim, d.classes, d.separation, cfg.seed)?,
        DatasetKind::Idx => {
            let dir = d.dir.as_ref().ok_or_else(|| CliError::Config("dataset.dir: required".into()))?;
            load_mnist_dir(dir)?
        }
    })
}

pub fn build_partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<PartitionMap, CliError> {
    let p = &cfg.partition;
    let k = cfg.num_clients;
    let map = if let Some(file) = &p.file {
        let text = std::fs::read_to_string(file)
            .map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
        let map = PartitionMap::from_json(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
        if map.sizes().iter().sum::<usize>() > train.len() {
            return Err(CliError::Data(format!(
                "{}: partition covers more samples than the dataset has",
                file.display()
            )));
        }
        map
    } else {
        match p.scheme {
            Scheme::Iid => iid_partition(train.len(), k, cfg.seed)?,
            Scheme::Shard => {
                let spec = ShardSpec {
                    num_shards: p.num_shards.unwrap_or(0),
                    shards_per_client: p.shards_per_client,
                    shard_size: p.shard_size,
                };
                shard_partition(train.labels(), spec, cfg.seed)?
            }
            Scheme::Dirichlet => dirichlet_label_partition(
                train.labels(),
                k,
                p.beta.unwrap_or(0.0),
                cfg.seed,
                p.min_size,
                DEFAULT_MAX_RETRIES,
            )?,
            Scheme::Quantity => quantity_skew_partition(
                train.len(),
                k,
                p.beta.unwrap_or(0.0),
                cfg.seed,
                p.min_size,
                DEFAULT_MAX_RETRIES,
            )?,
        }
    };
    if map.num_clients() != k {
        return Err(CliError::Config(format!(
            "num_clients: {k} but the partition has {} clients",
            map.num_clients()
        )));
    }
    Ok(map)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let (train, test) = load_data(cfg)?;
    let classes = train.num_classes().max(test.num_classes());
    let spec = match cfg.model.kind {
        ModelKind::Logistic => ModelSpec::logistic(train.dim(), classes),
        ModelKind::Mlp1 => ModelSpec::mlp1(train.dim(), cfg.model.hidden, classes),
    };
    let partition = build_partition(cfg, &train)?;
    let init = spec.init(cfg.seed)?;
    Ok(Prepared {
        spec,
        train: Arc::new(train),
        test,
        partition,
        init,
    })
}

fn client_ranks(k: usize) -> Vec<u32> {
    (1..=k as u32).collect()
}

fn sample_rng(cfg: &ExperimentConfig, round: u32) -> Rng {
    Rng::seed_from(cfg.seed, &[stream::SAMPLE, round.into()])
}

struct RowBuilder<'a> {
    cfg: &'a ExperimentConfig,
    prep: &'a Prepared,
    started: Instant,
}

impl<'a> RowBuilder<'a> {
    fn new(cfg: &'a ExperimentConfig, prep: &'a Prepared) -> Self {
        Self {
            cfg,
            prep,
            started: Instant::now(),
        }
    }

    /// Evaluates `global` and closes the current timing window.
    fn row(&mut self, round: u32, global: &ModelParameters, bytes_up: u64, bytes_down: u64) -> Result<MetricsRow, CliError> {
        let (global_loss, accuracy) = evaluate(&self.prep.spec, global, &self.prep.test)?;
        let wall_ms = if self.cfg.record_wall_time {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        };
        self.started = Instant::now();
        Ok(MetricsRow {
            round,
            global_loss,
            accuracy,
            bytes_up,
            bytes_down,
            wall_ms,
        })
    }
}

/// Serial rounds without any transport. Messages are still encoded so the
/// byte counts and the values the server sees match a networked run.
pub fn run_standalone(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunOutcome, CliError> {
    let fmt = cfg.wire_format();
    let layout = prep.spec.layout();
    let train_cfg = cfg.train_config();
    let mut global = prep.init.clone();
    let mut out = RunOutcome {
        rows: Vec::new(),
        trajectory: Vec::new(),
    };
    let mut rows = RowBuilder::new(cfg, prep);
    for round in 0..cfg.rounds {
        let picks = sample_clients(cfg.num_clients, cfg.sample_fraction, &mut sample_rng(cfg, round))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let reference = wire_view(&global, fmt.dtype);
        let (mut bytes_up, mut bytes_down) = (0, 0);
        let mut updates: Vec<ClientUpdate> = Vec::with_capacity(picks.len());
        for id in picks.into_iter().map(|i| i as u32) {
            let rank = id + 1;
            let down = model_package(0, rank, round, &global, fmt.dtype);
            bytes_down += down.encoded_len() as u64;
            let received = read_model(&down, &layout)?;
            let indices = prep
                .partition
                .client(id)
                .ok_or_else(|| CliError::Data(format!("partition has no client {id}")))?;
            let trained = local_train(&prep.spec, &received, &prep.train, indices, &train_cfg, id, round)?;
            let up = update_package(rank, 0, round, &trained, &received, fmt)?;
            bytes_up += up.encoded_len() as u64;
            updates.push(read_update(&up, &reference)?);
        }
        global = fedavg(&updates).map_err(fedsim::protocol::ProtocolError::from)?;
        out.rows.push(rows.row(round, &global, bytes_up, bytes_down)?);
        out.trajectory.push(global.clone());
    }
    Ok(out)
}

/// Contiguous, near-equal client groups for `groups` schedulers.
pub fn group_ranks(num_clients: usize, groups: u32) -> Vec<Vec<u32>> {
    let g = groups as usize;
    (0..g)
        .map(|i| ((i * num_clients / g) as u32 + 1..=((i + 1) * num_clients / g) as u32).collect())
        .collect()
}

/// Full protocol actors over the simulated network.
pub fn run_simulate(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunOutcome, CliError> {
    if cfg.async_mode.enabled {
        simulate_async(cfg, prep)
    } else {
        simulate_sync(cfg, prep, cfg.hierarchy.as_ref())
    }
}

fn simulate_sync(cfg: &ExperimentConfig, prep: &Prepared, hierarchy: Option<&HierarchyConfig>) -> Result<RunOutcome, CliError> {
    let fmt = cfg.wire_format();
    let layout = prep.spec.layout();
    let k = cfg.num_clients;
    let net = SimNet::new();
    let mut server_ep = net.endpoint(0, 0)?;
    let mut server_clients = client_ranks(k);
    match hierarchy {
        None => {
            for rank in client_ranks(k) {
                let c = SyncClient::new(prep.trainer(cfg, rank - 1)?, rank, layout.clone(), fmt);
                net.attach(Box::new(SyncClientActor::new(c)), &[(0, rank)])?;
            }
        }
        Some(h) => {
            if h.mode == SchedulerMode::MiddleAggregate {
                server_clients = (0..h.groups).map(|g| k as u32 + 1 + g).collect();
            }
            for (g, ranks) in group_ranks(k, h.groups).into_iter().enumerate() {
                let g = g as u32;
                let up_rank = k as u32 + 1 + g;
                let sched = Scheduler::new(SchedulerConfig {
                    group_id: g,
                    upstream_rank: up_rank,
                    map: RankMap::identity(&ranks),
                    mode: h.mode,
                    fmt,
                    layout: layout.clone(),
                })?;
                net.attach(Box::new(SchedulerActor(sched)), &[(0, up_rank), (g + 1, 0)])?;
                if h.mode == SchedulerMode::Forward {
                    for &r in &ranks {
                        net.alias(0, r, 0, up_rank)?;
                    }
                }
                for &r in &ranks {
                    let c = SyncClient::new(prep.trainer(cfg, r - 1)?, r, layout.clone(), fmt);
                    net.attach(Box::new(SyncClientActor::new(c)), &[(g + 1, r)])?;
                }
            }
        }
    }
    let mut server = SyncServer::new(prep.init.clone(), server_clients, cfg.sample_fraction, fmt);
    let mut out = RunOutcome {
        rows: Vec::new(),
        trajectory: Vec::new(),
    };
    let mut rows = RowBuilder::new(cfg, prep);
    for round in 0..cfg.rounds {
        let stats = sync_server_round(&mut server, &mut server_ep, &mut sample_rng(cfg, round))?;
        out.rows.push(rows.row(round, server.global(), stats.bytes_up, stats.bytes_down)?);
        out.trajectory.push(server.global().clone());
    }
    for p in server.finish() {
        server_ep.send(p)?;
    }
    net.run_until_idle()?;
    Ok(out)
}

fn simulate_async(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunOutcome, CliError> {
    let fmt = cfg.wire_format();
    let layout = prep.spec.layout();
    let net = SimNet::new();
    let mut ep = net.endpoint(0, 0)?;
    for rank in client_ranks(cfg.num_clients) {
        let c = AsyncClient::new(prep.trainer(cfg, rank - 1)?, rank, layout.clone(), fmt);
        net.attach(Box::new(AsyncClientActor::new(c)), &[(0, rank)])?;
    }
    net.start()?;
    let server = AsyncServer::new(prep.init.clone(), client_ranks(cfg.num_clients), cfg.rounds, cfg.async_mode.params, fmt);
    async_serve(cfg, prep, server, &mut ep)
}

/// Async server loop emitting one row per applied update. Traffic of
/// dropped updates is carried into the next row.
fn async_serve(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    mut server: AsyncServer,
    transport: &mut impl Transport,
) -> Result<RunOutcome, CliError> {
    let mut out = RunOutcome {
        rows: Vec::new(),
        trajectory: Vec::new(),
    };
    let mut rows = RowBuilder::new(cfg, prep);
    let (mut up, mut down) = (0, 0);
    let mut exited = BTreeSet::new();
    while !server.is_done() {
        let pkg = match transport.recv() {
            Ok(p) => p,
            // A client told to exit may hang up before the others are done.
            Err(TransportError::PeerClosed(r)) if exited.contains(&r) => continue,
            Err(e) => return Err(e.into()),
        };
        let (replies, event) = server.handle(pkg)?;
        exited.extend(replies.iter().filter(|p| p.code == MessageCode::Exit).map(|p| p.receiver));
        if let Some(ev) = event {
            up += ev.bytes_up;
            down += ev.bytes_down;
            if ev.applied {
                out.rows.push(rows.row(ev.round - 1, server.global(), up, down)?);
                out.trajectory.push(server.global().clone());
                (up, down) = (0, 0);
            }
        }
        for p in replies {
            transport.send(p)?;
        }
    }
    Ok(out)
}

/// Parameter server over TCP. Serves whichever ranks register, which are
/// clients in a flat or forwarding topology and schedulers when they
/// aggregate.
pub fn run_server(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunOutcome, CliError> {
    let mut transport = TcpServerTransport::bind(cfg.server_address()?)?;
    let peers = cfg.world_size() - 1;
    log::info!("server on {} waiting for {peers} ranks", transport.local_addr());
    let ranks = transport.accept_ranks(peers)?;
    log::info!("ranks registered: {ranks:?}");
    let fmt = cfg.wire_format();
    if cfg.async_mode.enabled {
        let server = AsyncServer::new(prep.init.clone(), ranks, cfg.rounds, cfg.async_mode.params, fmt);
        return async_serve(cfg, prep, server, &mut transport);
    }
    let mut server = SyncServer::new(prep.init.clone(), ranks, cfg.sample_fraction, fmt);
    let mut out = RunOutcome {
        rows: Vec::new(),
        trajectory: Vec::new(),
    };
    let mut rows = RowBuilder::new(cfg, prep);
    for round in 0..cfg.rounds {
        let stats = sync_server_round(&mut server, &mut transport, &mut sample_rng(cfg, round))?;
        log::info!("round {round}: {} updates", stats.sampled.len());
        out.rows.push(rows.row(round, server.global(), stats.bytes_up, stats.bytes_down)?);
        out.trajectory.push(server.global().clone());
    }
    for p in server.finish() {
        transport.send(p)?;
    }
    Ok(out)
}

/// One client process. Returns the number of local trainings performed.
pub fn run_client(cfg: &ExperimentConfig, prep: &Prepared) -> Result<u32, CliError> {
    let rank = cfg.rank()?;
    let trainer = prep.trainer(cfg, rank - 1)?;
    let mut transport = TcpClientTransport::connect(cfg.server_address()?, rank, RetryPolicy::default())?;
    let layout = prep.spec.layout();
    let fmt = cfg.wire_format();
    let n = if cfg.async_mode.enabled {
        async_client_loop(&mut AsyncClient::new(trainer, rank, layout, fmt), &mut transport)?
    } else {
        sync_client_loop(&mut SyncClient::new(trainer, rank, layout, fmt), &mut transport)?
    };
    log::info!("client {rank} done after {n} trainings");
    Ok(n)
}

/// Relay between the server and one client group. Clients dial
/// `scheduler.listen`; the scheduler dials `network.address` once all of
/// them have registered.
pub fn run_scheduler(cfg: &ExperimentConfig, prep: &Prepared) -> Result<(), CliError> {
    let s = &cfg.scheduler;
    let mode = s
        .mode
        .ok_or_else(|| CliError::Config("scheduler.mode: required in scheduler mode".into()))?;
    let listen = s
        .listen
        .as_deref()
        .ok_or_else(|| CliError::Config("scheduler.listen: required in scheduler mode".into()))?;
    let mut ranks = s.downstream.clone();
    ranks.sort_unstable();
    ranks.dedup();
    let upstream_rank = cfg.rank()?;
    let mut down = TcpServerTransport::bind(listen)?;
    log::info!("scheduler {} on {} waiting for {ranks:?}", s.group_id, down.local_addr());
    down.accept_ranks(ranks.len())?;
    let up_ranks = match mode {
        SchedulerMode::Forward => ranks.clone(),
        SchedulerMode::MiddleAggregate => vec![upstream_rank],
    };
    let up = TcpClientTransport::connect_as(cfg.server_address()?, &up_ranks, RetryPolicy::default())?;
    let mut scheduler = Scheduler::new(SchedulerConfig {
        group_id: s.group_id,
        upstream_rank,
        map: RankMap::identity(&ranks),
        mode,
        fmt: cfg.wire_format(),
        layout: prep.spec.layout(),
    })?;
    scheduler_run(&mut scheduler, up, down)?;
    Ok(())
}

fn emit(cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Result<(), CliError> {
    match &cfg.metrics_out {
        Some(path) => write_csv(path, rows)?,
        None => print!("{}", to_csv(rows)),
    }
    Ok(())
}

/// Validates `cfg`, runs the selected mode and writes the metrics.
pub fn run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    match cfg.mode {
        Mode::Standalone => emit(cfg, &run_standalone(cfg, &prep)?.rows),
        Mode::Simulate => emit(cfg, &run_simulate(cfg, &prep)?.rows),
        Mode::Server => emit(cfg, &run_server(cfg, &prep)?.rows),
        Mode::Client => run_client(cfg, &prep).map(|_| ()),
        Mode::Scheduler => run_scheduler(cfg, &prep),
    }
}
