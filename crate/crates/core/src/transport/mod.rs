//! Package delivery behind one blocking interface.
//!
//! [`sim`] is a deterministic in-process network used by the standalone and
//! simulate scenarios and by the test suite; [`tcp`] carries the same frames
//! over sockets for cross-process runs. Rank 0 is always the server.

use thiserror::Error;

use crate::packaging::{Package, PackagingError};

pub mod sim;
pub mod tcp;

pub const SERVER_RANK: u32 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("no endpoint registered for rank {0}")]
    UnknownEndpoint(u32),
    #[error("rank {0} registered twice")]
    DuplicateRank(u32),
    #[error("could not connect to {addr} after {attempts} attempts")]
    ConnectFailed { addr: String, attempts: u32 },
    #[error("channel closed")]
    ChannelClosed,
    #[error("peer rank {0} disconnected")]
    PeerClosed(u32),
    #[error("package #{seq} from rank {from} was lost")]
    Lost { seq: u64, from: u32 },
    #[error("framing error: {0}")]
    Framing(String),
    #[error(transparent)]
    Decode(#[from] PackagingError),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("simulated actor failed: {0}")]
    ActorFailed(String),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

/// One actor's connection to the network.
pub trait Transport {
    fn rank(&self) -> u32;

    /// Delivers `pkg` to `pkg.receiver`.
    fn send(&mut self, pkg: Package) -> Result<(), TransportError>;

    /// Next package addressed to this endpoint, blocking until one arrives.
    fn recv(&mut self) -> Result<Package, TransportError>;
}

/// Send half that can be used while another thread blocks in `recv`.
pub trait PackageSink: Send {
    fn send(&mut self, pkg: Package) -> Result<(), TransportError>;
}

/// A transport whose send side can be cloned off.
pub trait SplitTransport: Transport + Send {
    type Sink: PackageSink + 'static;

    fn sink(&self) -> Self::Sink;
}
