//! TCP transport: one stream per client, frames delimited by the package
//! length prefix.
//!
//! A client dials the server and announces itself with a `Register` package
//! carrying its rank as sender. A relay may send several `Register`s over one
//! connection to answer for a block of ranks. The server keeps one reader
//! thread per connection feeding a single ordered inbox.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::packaging::{decode_package, encode_package, MessageCode, Package, FRAME_OVERHEAD};

use super::{PackageSink, SplitTransport, Transport, TransportError, SERVER_RANK};

/// Frames above this size are treated as corruption.
pub const MAX_FRAME: u64 = 1 << 31;

/// Reads one frame. `Ok(None)` on a clean end of stream before the prefix.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Package>, TransportError> {
    let mut prefix = [0u8; 8];
    let mut filled = 0;
    while filled < prefix.len() {
        match r.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::Framing("stream ended inside a length prefix".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let total = u64::from_le_bytes(prefix);
    if total < FRAME_OVERHEAD as u64 || total > MAX_FRAME {
        return Err(TransportError::Framing(format!("implausible frame length {total}")));
    }
    let mut frame = vec![0u8; total as usize];
    frame[..8].copy_from_slice(&prefix);
    r.read_exact(&mut frame[8..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TransportError::Framing("stream ended inside a frame".into()),
        _ => e.into(),
    })?;
    Ok(Some(decode_package(&frame)?))
}

pub fn write_frame(w: &mut impl Write, pkg: &Package) -> Result<(), TransportError> {
    w.write_all(&encode_package(pkg))?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 5,
            backoff: Duration::from_secs(1),
        }
    }
}

type SharedStream = Arc<Mutex<BufWriter<TcpStream>>>;

fn shared(stream: &TcpStream) -> io::Result<SharedStream> {
    Ok(Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?))))
}

fn write_shared(stream: &SharedStream, pkg: &Package) -> Result<(), TransportError> {
    let mut guard = stream.lock().map_err(|_| TransportError::Io("writer lock poisoned".into()))?;
    write_frame(&mut *guard, pkg)
}

/// Client side: a single connection to the server (or to a scheduler).
pub struct TcpClientTransport {
    rank: u32,
    reader: BufReader<TcpStream>,
    writer: SharedStream,
}

impl TcpClientTransport {
    /// Dials `addr` with bounded retries, then registers `rank`.
    pub fn connect(
        addr: impl ToSocketAddrs + std::fmt::Display,
        rank: u32,
        policy: RetryPolicy,
    ) -> Result<Self, TransportError> {
        Self::connect_as(addr, &[rank], policy)
    }

    /// Like [`connect`](Self::connect) but registers every rank in `ranks`;
    /// the first one is this transport's own rank.
    pub fn connect_as(
        addr: impl ToSocketAddrs + std::fmt::Display,
        ranks: &[u32],
        policy: RetryPolicy,
    ) -> Result<Self, TransportError> {
        let rank = *ranks.first().ok_or(TransportError::UnknownEndpoint(SERVER_RANK))?;
        let attempts = policy.attempts.max(1);
        let mut stream = None;
        for attempt in 1..=attempts {
            match TcpStream::connect(&addr) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => {
                    log::info!("connect to {addr} failed ({e}), attempt {attempt}/{attempts}");
                    if attempt < attempts {
                        thread::sleep(policy.backoff);
                    }
                }
            }
        }
        let stream = stream.ok_or_else(|| TransportError::ConnectFailed {
            addr: addr.to_string(),
            attempts,
        })?;
        stream.set_nodelay(true)?;
        let mut t = Self {
            rank,
            writer: shared(&stream)?,
            reader: BufReader::new(stream),
        };
        for &r in ranks {
            t.register_rank(r)?;
        }
        Ok(t)
    }

    /// Announces an additional rank reachable over this connection.
    pub fn register_rank(&mut self, rank: u32) -> Result<(), TransportError> {
        write_shared(
            &self.writer,
            &Package::control(MessageCode::Register, rank, SERVER_RANK, 0),
        )
    }
}

impl Transport for TcpClientTransport {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn send(&mut self, pkg: Package) -> Result<(), TransportError> {
        write_shared(&self.writer, &pkg)
    }

    fn recv(&mut self) -> Result<Package, TransportError> {
        read_frame(&mut self.reader)?.ok_or(TransportError::ChannelClosed)
    }
}

/// Send half of a [`TcpClientTransport`].
#[derive(Clone)]
pub struct TcpClientSink {
    writer: SharedStream,
}

impl PackageSink for TcpClientSink {
    fn send(&mut self, pkg: Package) -> Result<(), TransportError> {
        write_shared(&self.writer, &pkg)
    }
}

impl SplitTransport for TcpClientTransport {
    type Sink = TcpClientSink;

    fn sink(&self) -> TcpClientSink {
        TcpClientSink {
            writer: self.writer.clone(),
        }
    }
}

enum Inbound {
    Register { rank: u32, conn: usize },
    Package(Package),
    Closed { conn: usize },
    Failed { conn: usize, err: TransportError },
}

type Routes = Arc<Mutex<BTreeMap<u32, (usize, SharedStream)>>>;

/// Server side: accepts registrations and multiplexes all connections into one inbox.
pub struct TcpServerTransport {
    rank: u32,
    local_addr: SocketAddr,
    routes: Routes,
    conns: BTreeMap<usize, SharedStream>,
    inbox: Receiver<Inbound>,
    new_conns: Receiver<(usize, SharedStream)>,
}

impl TcpServerTransport {
    /// Binds `addr` and starts accepting connections in the background.
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr)?;
        let local_addr = listener.local_addr()?;
        let (tx, inbox) = mpsc::channel();
        let (conn_tx, new_conns) = mpsc::channel();
        thread::spawn(move || accept_loop(listener, tx, conn_tx));
        Ok(Self {
            rank: SERVER_RANK,
            local_addr,
            routes: Arc::default(),
            conns: BTreeMap::new(),
            inbox,
            new_conns,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Ranks registered so far, ascending.
    pub fn ranks(&self) -> Vec<u32> {
        self.routes.lock().map(|r| r.keys().copied().collect()).unwrap_or_default()
    }

    fn absorb_new_conns(&mut self) {
        while let Ok((id, stream)) = self.new_conns.try_recv() {
            self.conns.insert(id, stream);
        }
    }

    fn handle_register(&mut self, rank: u32, conn: usize) -> Result<(), TransportError> {
        self.absorb_new_conns();
        let stream = self
            .conns
            .get(&conn)
            .cloned()
            .ok_or_else(|| TransportError::Io(format!("unknown connection {conn}")))?;
        let mut routes = self.routes.lock().map_err(|_| TransportError::Io("route lock".into()))?;
        if rank == SERVER_RANK || routes.contains_key(&rank) {
            return Err(TransportError::DuplicateRank(rank));
        }
        routes.insert(rank, (conn, stream));
        log::debug!("rank {rank} registered on connection {conn}");
        Ok(())
    }

    fn drop_conn(&mut self, conn: usize) -> Vec<u32> {
        self.conns.remove(&conn);
        let mut routes = match self.routes.lock() {
            Ok(r) => r,
            Err(_) => return Vec::new(),
        };
        let gone: Vec<u32> = routes
            .iter()
            .filter(|(_, (c, _))| *c == conn)
            .map(|(r, _)| *r)
            .collect();
        for r in &gone {
            routes.remove(r);
        }
        gone
    }

    /// Blocks until `count` distinct client ranks have registered.
    /// Packages that arrive early are kept for `recv`.
    pub fn accept_ranks(&mut self, count: usize) -> Result<Vec<u32>, TransportError> {
        let mut early = Vec::new();
        while self.ranks().len() < count {
            match self.inbox.recv().map_err(|_| TransportError::ChannelClosed)? {
                Inbound::Register { rank, conn } => self.handle_register(rank, conn)?,
                Inbound::Package(p) => early.push(p),
                Inbound::Closed { conn } => {
                    self.drop_conn(conn);
                }
                Inbound::Failed { conn, err } => {
                    self.drop_conn(conn);
                    log::warn!("connection {conn} failed during registration: {err}");
                }
            }
        }
        if !early.is_empty() {
            // Re-queue in arrival order behind anything newer.
            let (tx, rx) = mpsc::channel();
            for p in early {
                let _ = tx.send(Inbound::Package(p));
            }
            while let Ok(m) = self.inbox.try_recv() {
                let _ = tx.send(m);
            }
            // The accept loop still holds the old sender; keep draining it.
            let old = std::mem::replace(&mut self.inbox, rx);
            thread::spawn(move || {
                while let Ok(m) = old.recv() {
                    if tx.send(m).is_err() {
                        break;
                    }
                }
            });
        }
        Ok(self.ranks())
    }
}

impl Drop for TcpServerTransport {
    fn drop(&mut self) {
        self.absorb_new_conns();
        for stream in self.conns.values() {
            if let Ok(guard) = stream.lock() {
                let _ = guard.get_ref().shutdown(std::net::Shutdown::Write);
            }
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Inbound>, conn_tx: Sender<(usize, SharedStream)>) {
    for (conn, stream) in listener.incoming().enumerate() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let writer = match shared(&stream) {
            Ok(w) => w,
            Err(e) => {
                log::warn!("cannot clone stream: {e}");
                continue;
            }
        };
        if conn_tx.send((conn, writer)).is_err() {
            return;
        }
        let tx = tx.clone();
        thread::spawn(move || {
            let mut reader = BufReader::new(stream);
            loop {
                let msg = match read_frame(&mut reader) {
                    Ok(Some(p)) if p.code == MessageCode::Register => Inbound::Register {
                        rank: p.sender,
                        conn,
                    },
                    Ok(Some(p)) => Inbound::Package(p),
                    Ok(None) => {
                        let _ = tx.send(Inbound::Closed { conn });
                        return;
                    }
                    Err(err) => {
                        let _ = tx.send(Inbound::Failed { conn, err });
                        return;
                    }
                };
                if tx.send(msg).is_err() {
                    return;
                }
            }
        });
    }
}

impl Transport for TcpServerTransport {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn send(&mut self, pkg: Package) -> Result<(), TransportError> {
        TcpServerSink {
            routes: self.routes.clone(),
        }
        .send(pkg)
    }

    fn recv(&mut self) -> Result<Package, TransportError> {
        loop {
            match self.inbox.recv().map_err(|_| TransportError::ChannelClosed)? {
                Inbound::Package(p) => return Ok(p),
                Inbound::Register { rank, conn } => self.handle_register(rank, conn)?,
                Inbound::Closed { conn } => {
                    let gone = self.drop_conn(conn);
                    if let Some(&rank) = gone.first() {
                        return Err(TransportError::PeerClosed(rank));
                    }
                }
                Inbound::Failed { conn, err } => {
                    self.drop_conn(conn);
                    return Err(err);
                }
            }
        }
    }
}

/// Send half of a [`TcpServerTransport`].
#[derive(Clone)]
pub struct TcpServerSink {
    routes: Routes,
}

impl PackageSink for TcpServerSink {
    fn send(&mut self, pkg: Package) -> Result<(), TransportError> {
        let stream = {
            let routes = self.routes.lock().map_err(|_| TransportError::Io("route lock".into()))?;
            routes
                .get(&pkg.receiver)
                .map(|(_, s)| s.clone())
                .ok_or(TransportError::UnknownEndpoint(pkg.receiver))?
        };
        write_shared(&stream, &pkg)
    }
}

impl SplitTransport for TcpServerTransport {
    type Sink = TcpServerSink;

    fn sink(&self) -> TcpServerSink {
        TcpServerSink {
            routes: self.routes.clone(),
        }
    }
}
