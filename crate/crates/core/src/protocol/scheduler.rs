//! Relay between the server and one client group.
//!
//! The scheduler is rank 0 on its group's side. In `Forward` mode it passes
//! packages through unchanged apart from the rank fields; in
//! `MiddleAggregate` mode it fans the model out to the whole group, averages
//! the group's updates and sends one combined update upstream.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::aggregate::{fedavg, ClientUpdate};
use crate::packaging::{LayoutDescriptor, MessageCode, ModelParameters, Package};
use crate::transport::{PackageSink, SplitTransport, TransportError, SERVER_RANK};

use super::{model_package, read_model, read_update, update_package, ProtocolError, WireFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerMode {
    Forward,
    MiddleAggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Up,
    Down,
}

/// Translation between upstream (server-side) and downstream client ranks.
/// Ranks absent from the table are unroutable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankMap {
    up_to_down: BTreeMap<u32, u32>,
    down_to_up: BTreeMap<u32, u32>,
}

impl RankMap {
    pub fn identity(ranks: &[u32]) -> Self {
        Self::from_pairs(ranks.iter().map(|&r| (r, r))).expect("identity is a bijection")
    }

    /// Builds the map from `(upstream, downstream)` pairs; `None` if either
    /// side repeats a rank.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Option<Self> {
        let mut m = Self::default();
        for (up, down) in pairs {
            if m.up_to_down.insert(up, down).is_some() || m.down_to_up.insert(down, up).is_some() {
                return None;
            }
        }
        Some(m)
    }

    pub fn to_down(&self, up: u32) -> Result<u32, ProtocolError> {
        self.up_to_down.get(&up).copied().ok_or(ProtocolError::RoutingError(up))
    }

    pub fn to_up(&self, down: u32) -> Result<u32, ProtocolError> {
        self.down_to_up.get(&down).copied().ok_or(ProtocolError::RoutingError(down))
    }

    pub fn upstream_ranks(&self) -> Vec<u32> {
        self.up_to_down.keys().copied().collect()
    }

    pub fn downstream_ranks(&self) -> Vec<u32> {
        self.down_to_up.keys().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub group_id: u32,
    /// The scheduler's own rank towards the server (used in `MiddleAggregate`).
    pub upstream_rank: u32,
    pub map: RankMap,
    pub mode: SchedulerMode,
    pub fmt: WireFormat,
    /// Parameter layout; needed to decode models in `MiddleAggregate` mode.
    pub layout: LayoutDescriptor,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.map.downstream_ranks().is_empty() {
            return Err(ProtocolError::BadState("scheduler group is empty"));
        }
        if self.map.downstream_ranks().contains(&SERVER_RANK) {
            return Err(ProtocolError::RoutingError(SERVER_RANK));
        }
        Ok(())
    }
}

pub struct Scheduler {
    cfg: SchedulerConfig,
    round: u32,
    reference: Option<ModelParameters>,
    buffer: Vec<ClientUpdate>,
    exited: usize,
    done: bool,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            round: 0,
            reference: None,
            buffer: Vec::new(),
            exited: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    /// True once Exit has gone out to the whole group.
    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Consumes a package from one side and returns what to send on each side.
    pub fn handle(&mut self, side: Side, pkg: Package) -> Result<Vec<(Side, Package)>, ProtocolError> {
        match self.cfg.mode {
            SchedulerMode::Forward => self.forward(side, pkg),
            SchedulerMode::MiddleAggregate => self.middle(side, pkg),
        }
    }

    fn forward(&mut self, side: Side, mut pkg: Package) -> Result<Vec<(Side, Package)>, ProtocolError> {
        match side {
            Side::Up => {
                pkg.receiver = self.cfg.map.to_down(pkg.receiver)?;
                pkg.sender = SERVER_RANK;
                if pkg.code == MessageCode::Exit {
                    self.exited += 1;
                    self.done = self.exited >= self.cfg.map.downstream_ranks().len();
                }
                Ok(vec![(Side::Down, pkg)])
            }
            Side::Down => {
                pkg.sender = self.cfg.map.to_up(pkg.sender)?;
                pkg.receiver = SERVER_RANK;
                Ok(vec![(Side::Up, pkg)])
            }
        }
    }

    fn middle(&mut self, side: Side, pkg: Package) -> Result<Vec<(Side, Package)>, ProtocolError> {
        let group = self.cfg.map.downstream_ranks();
        match (side, pkg.code) {
            (Side::Up, MessageCode::ParameterUpdate) => {
                let global = read_model(&pkg, &self.cfg.layout)?;
                self.round = pkg.round;
                self.buffer.clear();
                let out = group
                    .iter()
                    .map(|&r| (Side::Down, model_package(SERVER_RANK, r, pkg.round, &global, pkg.dtype)))
                    .collect();
                self.reference = Some(global);
                Ok(out)
            }
            (Side::Up, MessageCode::Exit) => {
                self.done = true;
                Ok(group
                    .iter()
                    .map(|&r| (Side::Down, Package::control(MessageCode::Exit, SERVER_RANK, r, pkg.round)))
                    .collect())
            }
            (Side::Down, MessageCode::ParameterUpdate) => {
                if pkg.round > self.round {
                    return Err(ProtocolError::FutureRound {
                        got: pkg.round,
                        current: self.round,
                    });
                }
                if pkg.round < self.round {
                    log::info!("group {}: dropping stale update from {}", self.cfg.group_id, pkg.sender);
                    return Ok(Vec::new());
                }
                if !group.contains(&pkg.sender) {
                    return Err(ProtocolError::RoutingError(pkg.sender));
                }
                if self.buffer.iter().any(|u| u.client_id == pkg.sender) {
                    log::warn!("group {}: duplicate update from {}", self.cfg.group_id, pkg.sender);
                    return Ok(Vec::new());
                }
                let reference = self
                    .reference
                    .as_ref()
                    .ok_or(ProtocolError::BadState("update before any model"))?;
                self.buffer.push(read_update(&pkg, reference)?);
                if self.buffer.len() < group.len() {
                    return Ok(Vec::new());
                }
                self.buffer.sort_by_key(|u| u.client_id);
                let combined = ClientUpdate {
                    client_id: self.cfg.upstream_rank,
                    params: fedavg(&self.buffer)?,
                    n_k: self.buffer.iter().map(|u| u.n_k).sum(),
                    round_trained: self.round,
                };
                self.buffer.clear();
                let up = update_package(
                    self.cfg.upstream_rank,
                    SERVER_RANK,
                    self.round,
                    &combined,
                    reference,
                    self.cfg.fmt,
                )?;
                Ok(vec![(Side::Up, up)])
            }
            (side, code) => {
                log::warn!("group {}: dropping {code:?} from {side:?}", self.cfg.group_id);
                Ok(Vec::new())
            }
        }
    }
}

/// Relays between two transports until the scheduler is done. Each side is
/// read on its own thread; packages are handled in arrival order.
pub fn scheduler_run<U, D>(scheduler: &mut Scheduler, up: U, down: D) -> Result<(), ProtocolError>
where
    U: SplitTransport + 'static,
    D: SplitTransport + 'static,
{
    let mut up_sink = up.sink();
    let mut down_sink = down.sink();
    let (tx, rx) = mpsc::channel::<(Side, Result<Package, TransportError>)>();
    spawn_reader(Side::Up, up, tx.clone());
    spawn_reader(Side::Down, down, tx);
    while !scheduler.is_done() {
        let (side, received) = rx.recv().map_err(|_| TransportError::ChannelClosed)?;
        for (to, pkg) in scheduler.handle(side, received?)? {
            match to {
                Side::Up => up_sink.send(pkg)?,
                Side::Down => down_sink.send(pkg)?,
            }
        }
    }
    Ok(())
}

fn spawn_reader<T: SplitTransport + 'static>(
    side: Side,
    mut transport: T,
    tx: mpsc::Sender<(Side, Result<Package, TransportError>)>,
) {
    thread::spawn(move || loop {
        let r = transport.recv();
        let stop = r.is_err();
        if tx.send((side, r)).is_err() || stop {
            return;
        }
    });
}
