//! Deterministic in-memory network.
//!
//! Every send gets a global sequence number and lands in the destination's
//! FIFO. Deliveries always pick the lowest pending sequence number, so the
//! delivery order is a pure function of the program order of sends.
//!
//! Endpoints come in two flavours. *Driver* endpoints are held by code that
//! calls [`Transport::recv`] directly (typically the server loop). *Actor*
//! endpoints belong to a [`SimActor`]; their packages are handed to the actor
//! whenever a driver's `recv` pumps the network. A driver's `recv` therefore
//! runs the whole simulation forward until something arrives for it, and
//! reports [`TransportError::ChannelClosed`] once nothing is left in flight.
//!
//! Endpoints live in numbered segments (LANs). Ranks are unique within a
//! segment; a package is routed by its `receiver` rank inside the sender's
//! segment. Aliases let one endpoint answer for several ranks, which is how a
//! forwarding scheduler stands in for its clients on the server's segment.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use crate::packaging::{MessageCode, Package};

use super::{Transport, TransportError};

pub type EndpointId = usize;
pub type Segment = u32;

/// Outgoing package tagged with the actor-local port it leaves from.
pub type PortSend = (usize, Package);

pub type ActorResult = Result<Vec<PortSend>, Box<dyn std::error::Error + Send + Sync>>;

/// A reactive participant driven by the network.
///
/// Ports are indices into the endpoint list given to [`SimNet::attach`].
pub trait SimActor {
    /// Called once by [`SimNet::start`].
    fn on_start(&mut self) -> ActorResult {
        Ok(Vec::new())
    }

    fn on_package(&mut self, port: usize, pkg: Package) -> ActorResult;

    fn on_transport_error(&mut self, port: usize, err: TransportError) -> ActorResult {
        log::warn!("actor port {port}: {err}");
        Ok(Vec::new())
    }

    /// True once the actor will never send again.
    fn is_done(&self) -> bool {
        false
    }
}

enum Delivery {
    Package(Package),
    Lost { seq: u64, from: u32 },
}

struct EndpointInfo {
    segment: Segment,
    rank: u32,
    actor: Option<(usize, usize)>,
    closed: bool,
    queue: VecDeque<(u64, Delivery)>,
}

/// One delivered (or lost) package, in delivery order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub seq: u64,
    pub segment: Segment,
    pub from: u32,
    pub to: u32,
    pub code: MessageCode,
    pub lost: bool,
}

#[derive(Default)]
struct Inner {
    routes: BTreeMap<(Segment, u32), EndpointId>,
    endpoints: Vec<EndpointInfo>,
    actors: Vec<Option<Box<dyn SimActor>>>,
    actor_ports: Vec<Vec<EndpointId>>,
    next_seq: u64,
    drop_schedule: BTreeSet<u64>,
    trace: Vec<TraceEntry>,
}

impl Inner {
    fn register(&mut self, segment: Segment, rank: u32) -> Result<EndpointId, TransportError> {
        if self.routes.contains_key(&(segment, rank)) {
            return Err(TransportError::DuplicateRank(rank));
        }
        let id = self.endpoints.len();
        self.endpoints.push(EndpointInfo {
            segment,
            rank,
            actor: None,
            closed: false,
            queue: VecDeque::new(),
        });
        self.routes.insert((segment, rank), id);
        Ok(id)
    }

    fn enqueue(&mut self, from: EndpointId, pkg: Package) -> Result<(), TransportError> {
        let (segment, from_rank) = {
            let e = &self.endpoints[from];
            (e.segment, e.rank)
        };
        let dest = *self
            .routes
            .get(&(segment, pkg.receiver))
            .ok_or(TransportError::UnknownEndpoint(pkg.receiver))?;
        if self.endpoints[dest].closed {
            return Err(TransportError::ChannelClosed);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let delivery = if self.drop_schedule.contains(&seq) {
            Delivery::Lost {
                seq,
                from: pkg.sender,
            }
        } else {
            Delivery::Package(pkg)
        };
        log::trace!("sim seq {seq}: rank {from_rank} -> endpoint {dest}");
        self.endpoints[dest].queue.push_back((seq, delivery));
        Ok(())
    }

    /// Endpoint holding the globally oldest pending delivery among `me` and
    /// the actor endpoints.
    fn next_deliverable(&self, me: Option<EndpointId>) -> Option<EndpointId> {
        self.endpoints
            .iter()
            .enumerate()
            .filter(|(id, e)| Some(*id) == me || e.actor.is_some())
            .filter_map(|(id, e)| e.queue.front().map(|(seq, _)| (*seq, id)))
            .min()
            .map(|(_, id)| id)
    }

    fn pop(&mut self, id: EndpointId) -> (u64, Delivery) {
        let (seq, d) = self.endpoints[id].queue.pop_front().expect("nonempty queue");
        let e = &self.endpoints[id];
        let (from, code, lost) = match &d {
            Delivery::Package(p) => (p.sender, p.code, false),
            Delivery::Lost { from, .. } => (*from, MessageCode::ParameterUpdate, true),
        };
        self.trace.push(TraceEntry {
            seq,
            segment: e.segment,
            from,
            to: e.rank,
            code,
            lost,
        });
        (seq, d)
    }
}

/// Shared handle to a simulated network.
#[derive(Clone, Default)]
pub struct SimNet {
    inner: Rc<RefCell<Inner>>,
}

impl SimNet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Driver endpoints for each rank in segment 0.
    pub fn with_ranks(ranks: &[u32]) -> Result<(Self, Vec<SimEndpoint>), TransportError> {
        let net = Self::new();
        let eps = ranks
            .iter()
            .map(|&r| net.endpoint(0, r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((net, eps))
    }

    /// Registers a driver endpoint.
    pub fn endpoint(&self, segment: Segment, rank: u32) -> Result<SimEndpoint, TransportError> {
        let id = self.inner.borrow_mut().register(segment, rank)?;
        Ok(SimEndpoint {
            net: self.clone(),
            id,
            rank,
        })
    }

    /// Registers `actor` with one endpoint per `(segment, rank)` port.
    pub fn attach(
        &self,
        actor: Box<dyn SimActor>,
        ports: &[(Segment, u32)],
    ) -> Result<usize, TransportError> {
        let mut inner = self.inner.borrow_mut();
        let actor_id = inner.actors.len();
        let mut ids = Vec::with_capacity(ports.len());
        for (port, &(segment, rank)) in ports.iter().enumerate() {
            let id = inner.register(segment, rank)?;
            inner.endpoints[id].actor = Some((actor_id, port));
            ids.push(id);
        }
        inner.actors.push(Some(actor));
        inner.actor_ports.push(ids);
        Ok(actor_id)
    }

    /// Routes `rank` in `segment` to the endpoint registered as `(target_segment, target_rank)`.
    pub fn alias(
        &self,
        segment: Segment,
        rank: u32,
        target_segment: Segment,
        target_rank: u32,
    ) -> Result<(), TransportError> {
        let mut inner = self.inner.borrow_mut();
        let target = *inner
            .routes
            .get(&(target_segment, target_rank))
            .ok_or(TransportError::UnknownEndpoint(target_rank))?;
        if inner.routes.contains_key(&(segment, rank)) {
            return Err(TransportError::DuplicateRank(rank));
        }
        inner.routes.insert((segment, rank), target);
        Ok(())
    }

    /// Turns the packages with these sequence numbers into loss notices at
    /// their destination.
    pub fn drop_packages(&self, seqs: impl IntoIterator<Item = u64>) {
        self.inner.borrow_mut().drop_schedule.extend(seqs);
    }

    /// Sequence number the next send will receive.
    pub fn next_seq(&self) -> u64 {
        self.inner.borrow().next_seq
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.inner.borrow().trace.clone()
    }

    /// Runs every actor's `on_start` in attachment order.
    pub fn start(&self) -> Result<(), TransportError> {
        let n = self.inner.borrow().actors.len();
        for actor_id in 0..n {
            self.run_actor(actor_id, |a| a.on_start())?;
        }
        Ok(())
    }

    /// Delivers pending packages to actors until none are left. Packages for
    /// driver endpoints stay queued.
    pub fn run_until_idle(&self) -> Result<(), TransportError> {
        while self.step(None)?.is_some() {}
        Ok(())
    }

    fn run_actor(
        &self,
        actor_id: usize,
        f: impl FnOnce(&mut dyn SimActor) -> ActorResult,
    ) -> Result<(), TransportError> {
        let mut actor = self.inner.borrow_mut().actors[actor_id]
            .take()
            .expect("actor is not re-entered");
        let result = f(actor.as_mut());
        let mut inner = self.inner.borrow_mut();
        inner.actors[actor_id] = Some(actor);
        let sends = result.map_err(|e| TransportError::ActorFailed(e.to_string()))?;
        for (port, pkg) in sends {
            let from = *inner.actor_ports[actor_id]
                .get(port)
                .ok_or_else(|| TransportError::ActorFailed(format!("actor has no port {port}")))?;
            inner.enqueue(from, pkg)?;
        }
        Ok(())
    }

    /// Performs one delivery. Returns `Some(d)` when the delivery was for the
    /// driver endpoint `me`, `None` when nothing is deliverable, and
    /// otherwise hands the package to its actor and returns `Some(None)`.
    #[allow(clippy::type_complexity)]
    fn step(
        &self,
        me: Option<EndpointId>,
    ) -> Result<Option<Option<Result<Package, TransportError>>>, TransportError> {
        let (id, delivery) = {
            let mut inner = self.inner.borrow_mut();
            let Some(id) = inner.next_deliverable(me) else {
                return Ok(None);
            };
            (id, inner.pop(id).1)
        };
        if Some(id) == me {
            return Ok(Some(Some(match delivery {
                Delivery::Package(p) => Ok(p),
                Delivery::Lost { seq, from } => Err(TransportError::Lost { seq, from }),
            })));
        }
        let (actor_id, port) = self.inner.borrow().endpoints[id].actor.expect("actor endpoint");
        match delivery {
            Delivery::Package(p) => self.run_actor(actor_id, |a| a.on_package(port, p))?,
            Delivery::Lost { seq, from } => self.run_actor(actor_id, |a| {
                a.on_transport_error(port, TransportError::Lost { seq, from })
            })?,
        }
        Ok(Some(None))
    }
}

/// Driver-side endpoint.
pub struct SimEndpoint {
    net: SimNet,
    id: EndpointId,
    rank: u32,
}

impl SimEndpoint {
    pub fn net(&self) -> &SimNet {
        &self.net
    }

    /// Marks the endpoint closed; later sends to it fail with `ChannelClosed`.
    pub fn close(&self) {
        self.net.inner.borrow_mut().endpoints[self.id].closed = true;
    }
}

impl Transport for SimEndpoint {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn send(&mut self, pkg: Package) -> Result<(), TransportError> {
        self.net.inner.borrow_mut().enqueue(self.id, pkg)
    }

    fn recv(&mut self) -> Result<Package, TransportError> {
        loop {
            match self.net.step(Some(self.id))? {
                None => return Err(TransportError::ChannelClosed),
                Some(Some(result)) => return result,
                Some(None) => {}
            }
        }
    }
}

impl Drop for SimEndpoint {
    fn drop(&mut self) {
        if let Ok(mut inner) = self.net.inner.try_borrow_mut() {
            inner.endpoints[self.id].closed = true;
        }
    }
}
