//! Asynchronous pattern: clients pull the current model, train, and push;
//! the server mixes every update into the global model as it arrives.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggregate::async_mix;
use crate::packaging::{LayoutDescriptor, MessageCode, ModelParameters, Package};
use crate::trainer::Trainer;
use crate::transport::{Transport, SERVER_RANK};

use super::sync::ClientPhase;
use super::{model_package, read_model, read_update, update_package, wire_view, ProtocolError, WireFormat};

/// Acknowledgement of an applied update. The `Register` code is reused.
pub const ACK: MessageCode = MessageCode::Register;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsyncConfig {
    pub alpha: f64,
    pub staleness_exponent: f64,
    /// Updates older than this many server rounds are dropped instead of mixed.
    pub max_staleness: Option<u32>,
}

impl Default for AsyncConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            staleness_exponent: 0.0,
            max_staleness: None,
        }
    }
}

/// One applied (or dropped) update, with the traffic since the previous event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsyncEvent {
    /// Server round after the event.
    pub round: u32,
    pub client: u32,
    pub staleness: u32,
    pub applied: bool,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone)]
pub struct AsyncServer {
    rank: u32,
    clients: BTreeSet<u32>,
    global: ModelParameters,
    round: u32,
    total_updates: u32,
    cfg: AsyncConfig,
    fmt: WireFormat,
    /// Model each client was last sent, as it decoded it.
    sent: BTreeMap<u32, ModelParameters>,
    exited: BTreeSet<u32>,
    bytes_up: u64,
    bytes_down: u64,
}

impl AsyncServer {
    /// Serves until `total_updates` updates have been applied, then answers
    /// every request with Exit.
    pub fn new(
        global: ModelParameters,
        clients: impl IntoIterator<Item = u32>,
        total_updates: u32,
        cfg: AsyncConfig,
        fmt: WireFormat,
    ) -> Self {
        Self {
            rank: SERVER_RANK,
            clients: clients.into_iter().collect(),
            global,
            round: 0,
            total_updates,
            cfg,
            fmt,
            sent: BTreeMap::new(),
            exited: BTreeSet::new(),
            bytes_up: 0,
            bytes_down: 0,
        }
    }

    pub fn global(&self) -> &ModelParameters {
        &self.global
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// True once every client has been told to exit.
    pub fn is_done(&self) -> bool {
        self.exited == self.clients
    }

    fn reply(&mut self, pkg: Package, out: &mut Vec<Package>) {
        self.bytes_down += pkg.encoded_len() as u64;
        out.push(pkg);
    }

    /// Consumes one package and returns the replies plus, for updates, the event.
    pub fn handle(&mut self, pkg: Package) -> Result<(Vec<Package>, Option<AsyncEvent>), ProtocolError> {
        let mut out = Vec::new();
        if pkg.round > self.round {
            return Err(ProtocolError::FutureRound {
                got: pkg.round,
                current: self.round,
            });
        }
        if !self.clients.contains(&pkg.sender) {
            log::warn!("dropping {:?} from unknown rank {}", pkg.code, pkg.sender);
            return Ok((out, None));
        }
        match pkg.code {
            MessageCode::ParameterRequest => {
                self.bytes_up += pkg.encoded_len() as u64;
                if self.round >= self.total_updates {
                    self.exited.insert(pkg.sender);
                    let exit = Package::control(MessageCode::Exit, self.rank, pkg.sender, self.round);
                    self.reply(exit, &mut out);
                } else {
                    self.sent.insert(pkg.sender, wire_view(&self.global, self.fmt.dtype));
                    let model = model_package(self.rank, pkg.sender, self.round, &self.global, self.fmt.dtype);
                    self.reply(model, &mut out);
                }
                Ok((out, None))
            }
            MessageCode::ParameterUpdate => {
                let reference = self
                    .sent
                    .remove(&pkg.sender)
                    .ok_or(ProtocolError::BadState("update without a preceding model"))?;
                self.bytes_up += pkg.encoded_len() as u64;
                let update = read_update(&pkg, &reference)?;
                let staleness = self.round - update.round_trained;
                let applied = self.round < self.total_updates
                    && self.cfg.max_staleness.is_none_or(|m| staleness <= m);
                if applied {
                    self.global = async_mix(
                        &self.global,
                        &update,
                        self.cfg.alpha,
                        self.round,
                        self.cfg.staleness_exponent,
                    )?;
                    self.round += 1;
                } else {
                    log::info!("dropping update from rank {} with staleness {staleness}", pkg.sender);
                }
                let ack = Package::control(ACK, self.rank, pkg.sender, self.round);
                self.reply(ack, &mut out);
                let event = AsyncEvent {
                    round: self.round,
                    client: pkg.sender,
                    staleness,
                    applied,
                    bytes_up: std::mem::take(&mut self.bytes_up),
                    bytes_down: std::mem::take(&mut self.bytes_down),
                };
                Ok((out, Some(event)))
            }
            other => {
                log::warn!("dropping {:?} from rank {}", other, pkg.sender);
                Ok((out, None))
            }
        }
    }
}

/// Runs the server until every client has exited. Returns one event per update.
pub fn async_server_run(
    server: &mut AsyncServer,
    transport: &mut impl Transport,
) -> Result<Vec<AsyncEvent>, ProtocolError> {
    let mut events = Vec::new();
    while !server.is_done() {
        let pkg = transport.recv()?;
        let (out, event) = server.handle(pkg)?;
        events.extend(event);
        for p in out {
            transport.send(p)?;
        }
    }
    Ok(events)
}

/// Client side of the asynchronous pattern.
pub struct AsyncClient<T> {
    trainer: T,
    rank: u32,
    layout: LayoutDescriptor,
    fmt: WireFormat,
    phase: ClientPhase,
    rounds_trained: u32,
}

impl<T: Trainer> AsyncClient<T> {
    pub fn new(trainer: T, rank: u32, layout: LayoutDescriptor, fmt: WireFormat) -> Self {
        Self {
            trainer,
            rank,
            layout,
            fmt,
            phase: ClientPhase::WaitingModel,
            rounds_trained: 0,
        }
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn rounds_trained(&self) -> u32 {
        self.rounds_trained
    }

    fn request(&self, round: u32) -> Package {
        Package::control(MessageCode::ParameterRequest, self.rank, SERVER_RANK, round)
    }

    /// The opening request.
    pub fn on_start(&mut self) -> Vec<Package> {
        vec![self.request(0)]
    }

    pub fn handle(&mut self, pkg: Package) -> Result<Vec<Package>, ProtocolError> {
        if self.phase == ClientPhase::Exited {
            return Err(ProtocolError::BadState("client already exited"));
        }
        match pkg.code {
            MessageCode::ParameterUpdate => {
                let global = read_model(&pkg, &self.layout)?;
                self.phase = ClientPhase::Training;
                let update = self.trainer.train(&global, pkg.round)?;
                self.phase = ClientPhase::Uploading;
                let reply = update_package(self.rank, pkg.sender, pkg.round, &update, &global, self.fmt)?;
                self.rounds_trained += 1;
                self.phase = ClientPhase::WaitingModel;
                Ok(vec![reply])
            }
            ACK => Ok(vec![self.request(pkg.round)]),
            MessageCode::Exit => {
                self.phase = ClientPhase::Exited;
                Ok(Vec::new())
            }
            other => {
                log::warn!("client {} dropping {:?}", self.rank, other);
                Ok(Vec::new())
            }
        }
    }
}

/// Pulls, trains and pushes until Exit. Returns the number of updates sent.
pub fn async_client_loop<T: Trainer>(
    client: &mut AsyncClient<T>,
    transport: &mut impl Transport,
) -> Result<u32, ProtocolError> {
    for p in client.on_start() {
        transport.send(p)?;
    }
    while client.phase() != ClientPhase::Exited {
        let pkg = transport.recv()?;
        for out in client.handle(pkg)? {
            transport.send(out)?;
        }
    }
    Ok(client.rounds_trained())
}
