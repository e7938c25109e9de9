//! Synchronous rounds: broadcast to a sample, wait for every reply, average.

use crate::aggregate::{sample_clients, SyncHandlerState};
use crate::packaging::{LayoutDescriptor, MessageCode, ModelParameters, Package};
use crate::rng::Rng;
use crate::trainer::Trainer;
use crate::transport::{Transport, TransportError, SERVER_RANK};

use super::{model_package, read_model, read_update, update_package, wire_view, ProtocolError, WireFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerPhase {
    Idle,
    Collecting,
    Finished,
}

/// Traffic of one completed round as counted on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundStats {
    pub round: u32,
    pub sampled: Vec<u32>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone)]
pub struct SyncServer {
    rank: u32,
    clients: Vec<u32>,
    fraction: f64,
    fmt: WireFormat,
    phase: ServerPhase,
    handler: SyncHandlerState,
    sampled: Vec<u32>,
    reported: Vec<u32>,
    reference: Option<ModelParameters>,
    bytes_up: u64,
    bytes_down: u64,
}

impl SyncServer {
    /// `clients` are the ranks the server samples from.
    pub fn new(global: ModelParameters, clients: Vec<u32>, fraction: f64, fmt: WireFormat) -> Self {
        Self {
            rank: SERVER_RANK,
            clients,
            fraction,
            fmt,
            phase: ServerPhase::Idle,
            handler: SyncHandlerState::new(global),
            sampled: Vec::new(),
            reported: Vec::new(),
            reference: None,
            bytes_up: 0,
            bytes_down: 0,
        }
    }

    pub fn phase(&self) -> ServerPhase {
        self.phase
    }

    pub fn round(&self) -> u32 {
        self.handler.round()
    }

    pub fn global(&self) -> &ModelParameters {
        self.handler.global()
    }

    pub fn sampled(&self) -> &[u32] {
        &self.sampled
    }

    /// Samples this round's clients and returns the model messages for them.
    pub fn start_round(&mut self, rng: &mut Rng) -> Result<Vec<Package>, ProtocolError> {
        if self.phase != ServerPhase::Idle {
            return Err(ProtocolError::BadState("start_round outside Idle"));
        }
        let picks = sample_clients(self.clients.len(), self.fraction, rng)?;
        self.sampled = picks.into_iter().map(|i| self.clients[i]).collect();
        self.reported.clear();
        self.handler.begin_round(self.sampled.len());
        self.reference = Some(wire_view(self.handler.global(), self.fmt.dtype));
        self.bytes_up = 0;
        let round = self.round();
        let out: Vec<Package> = self
            .sampled
            .iter()
            .map(|&r| model_package(self.rank, r, round, self.handler.global(), self.fmt.dtype))
            .collect();
        self.bytes_down = out.iter().map(|p| p.encoded_len() as u64).sum();
        self.phase = ServerPhase::Collecting;
        Ok(out)
    }

    /// Consumes one incoming package. Returns the round's stats once the
    /// last expected update has been aggregated.
    pub fn handle(&mut self, pkg: Package) -> Result<Option<RoundStats>, ProtocolError> {
        if self.phase != ServerPhase::Collecting {
            log::warn!("dropping {:?} from rank {} outside a round", pkg.code, pkg.sender);
            return Ok(None);
        }
        let round = self.round();
        if pkg.round > round {
            return Err(ProtocolError::FutureRound {
                got: pkg.round,
                current: round,
            });
        }
        if pkg.code != MessageCode::ParameterUpdate {
            log::warn!("dropping unexpected {:?} from rank {}", pkg.code, pkg.sender);
            return Ok(None);
        }
        if pkg.round < round {
            log::info!("dropping stale update from rank {} (round {})", pkg.sender, pkg.round);
            return Ok(None);
        }
        if !self.sampled.contains(&pkg.sender) || self.reported.contains(&pkg.sender) {
            log::warn!("dropping update from unexpected sender {}", pkg.sender);
            return Ok(None);
        }
        let reference = self.reference.as_ref().expect("set by start_round");
        let update = read_update(&pkg, reference)?;
        self.bytes_up += pkg.encoded_len() as u64;
        self.reported.push(pkg.sender);
        if !self.handler.receive(update)? {
            return Ok(None);
        }
        self.phase = ServerPhase::Idle;
        Ok(Some(RoundStats {
            round,
            sampled: self.sampled.clone(),
            bytes_up: self.bytes_up,
            bytes_down: self.bytes_down,
        }))
    }

    /// Rolls back an unfinished round.
    pub fn abort_round(&mut self) {
        self.handler.clear_buffer();
        self.reported.clear();
        self.phase = ServerPhase::Idle;
    }

    /// Exit messages for every client.
    pub fn finish(&mut self) -> Vec<Package> {
        self.phase = ServerPhase::Finished;
        let round = self.round();
        self.clients
            .iter()
            .map(|&r| Package::control(MessageCode::Exit, self.rank, r, round))
            .collect()
    }
}

/// Runs one full round over `transport`. Any transport failure aborts the
/// round and leaves the server idle with its previous global model.
pub fn sync_server_round(
    server: &mut SyncServer,
    transport: &mut impl Transport,
    rng: &mut Rng,
) -> Result<RoundStats, ProtocolError> {
    let round = server.round();
    let abort = |server: &mut SyncServer, cause: TransportError| {
        server.abort_round();
        ProtocolError::RoundAborted { round, cause }
    };
    for pkg in server.start_round(rng)? {
        if let Err(e) = transport.send(pkg) {
            return Err(abort(server, e));
        }
    }
    loop {
        let pkg = match transport.recv() {
            Ok(p) => p,
            Err(e) => return Err(abort(server, e)),
        };
        match server.handle(pkg) {
            Ok(Some(stats)) => return Ok(stats),
            Ok(None) => {}
            Err(e) => {
                server.abort_round();
                return Err(e);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    WaitingModel,
    Training,
    Uploading,
    Exited,
}

/// Client side of the synchronous pattern.
pub struct SyncClient<T> {
    trainer: T,
    rank: u32,
    layout: LayoutDescriptor,
    fmt: WireFormat,
    phase: ClientPhase,
    rounds_trained: u32,
}

impl<T: Trainer> SyncClient<T> {
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

    pub fn trainer(&self) -> &T {
        &self.trainer
    }

    /// Trains on a model message and answers with an update; stops on Exit.
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

/// Serves rounds until Exit. Returns the number of rounds trained.
pub fn sync_client_loop<T: Trainer>(
    client: &mut SyncClient<T>,
    transport: &mut impl Transport,
) -> Result<u32, ProtocolError> {
    while client.phase() != ClientPhase::Exited {
        let pkg = transport.recv()?;
        for out in client.handle(pkg)? {
            transport.send(out)?;
        }
    }
    Ok(client.rounds_trained())
}
