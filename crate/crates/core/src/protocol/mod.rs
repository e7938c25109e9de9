//! Federated round orchestration: synchronous and asynchronous server and
//! client state machines, and the scheduler relay used for client groups.
//!
//! The state machines are transport-agnostic: each consumes one [`Package`]
//! at a time and returns the packages to send. Small driver loops connect
//! them to a [`crate::transport::Transport`], and adapters in [`actors`]
//! plug them into the simulated network.
//!
//! # Message contents
//!
//! * Model (`ParameterUpdate`, server to client): one slice holding the
//!   global parameters densely at the package dtype.
//! * Update (`ParameterUpdate`, client to server): slice 0 holds either the
//!   full parameters (compression `None`) or the codec-encoded difference
//!   between the trained parameters and the model the client received;
//!   slice 1 holds the sample count as a little-endian u64.
//! * `ParameterRequest`, `Exit` and the asynchronous acknowledgement
//!   (`Register` code) carry no slices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{AggregateError, ClientUpdate};
use crate::compress::{decode_dense, Codec, CompressError};
use crate::packaging::{
    CompressionTag, DType, LayoutDescriptor, MessageCode, ModelParameters, Package, PackagingError,
};
use crate::trainer::TrainError;
use crate::transport::TransportError;

pub mod actors;
pub mod asynchronous;
pub mod scheduler;
pub mod sync;

pub use asynchronous::{async_client_loop, async_server_run, AsyncClient, AsyncConfig, AsyncEvent, AsyncServer};
pub use scheduler::{scheduler_run, RankMap, Scheduler, SchedulerConfig, SchedulerMode, Side};
pub use sync::{sync_client_loop, sync_server_round, RoundStats, ServerPhase, SyncClient, SyncServer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Packaging(#[from] PackagingError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("round {round} aborted: {cause}")]
    RoundAborted { round: u32, cause: TransportError },
    #[error("package for round {got} arrived while at round {current}")]
    FutureRound { got: u32, current: u32 },
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("no route for rank {0}")]
    RoutingError(u32),
    #[error("operation not valid in the current state: {0}")]
    BadState(&'static str),
}

fn malformed(what: &'static str, detail: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed {
        what,
        detail: detail.into(),
    }
}

/// Uplink compression choice.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Compression {
    #[default]
    None,
    /// Keep `round_half_up(fraction * n)` entries, at least one.
    TopK { fraction: f64 },
    F16,
}

impl Compression {
    pub fn codec(self, n: usize) -> Codec {
        match self {
            Compression::None => Codec::Dense,
            Compression::TopK { fraction } => {
                let k = (fraction * n as f64 + 0.5).floor() as usize;
                Codec::TopK { k: k.clamp(1, n.max(1)) }
            }
            Compression::F16 => Codec::F16,
        }
    }

    pub fn validate(self) -> Result<(), String> {
        match self {
            Compression::TopK { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                Err(format!("top-k fraction {fraction} outside (0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Value precision and uplink compression used on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireFormat {
    pub dtype: DType,
    pub compression: Compression,
}

impl Default for WireFormat {
    fn default() -> Self {
        Self {
            dtype: DType::F64,
            compression: Compression::None,
        }
    }
}

/// Model message carrying `params` densely at `dtype`.
pub fn model_package(
    sender: u32,
    receiver: u32,
    round: u32,
    params: &ModelParameters,
    dtype: DType,
) -> Package {
    Package::control(MessageCode::ParameterUpdate, sender, receiver, round)
        .with_format(dtype, CompressionTag::None)
        .with_slice(&dtype.encode(params.values()))
}

/// Parameters from a model message, restored into `layout`.
pub fn read_model(pkg: &Package, layout: &LayoutDescriptor) -> Result<ModelParameters, ProtocolError> {
    if pkg.code != MessageCode::ParameterUpdate || pkg.compression != CompressionTag::None {
        return Err(malformed("model message", format!("{:?}/{:?}", pkg.code, pkg.compression)));
    }
    let bytes = pkg.slice(0).ok_or_else(|| malformed("model message", "missing slice"))?;
    let values = pkg
        .dtype
        .decode(bytes)
        .ok_or_else(|| malformed("model message", "ragged slice"))?;
    Ok(ModelParameters::new(values, layout.clone())?)
}

/// `params` as the receiver of a model message at `dtype` will see them.
pub fn wire_view(params: &ModelParameters, dtype: DType) -> ModelParameters {
    let values = params.values().iter().map(|&v| dtype.round(v)).collect();
    params.with_values(values).expect("same length")
}

/// Update message for `update`, which was trained from `reference`.
pub fn update_package(
    sender: u32,
    receiver: u32,
    round: u32,
    update: &ClientUpdate,
    reference: &ModelParameters,
    fmt: WireFormat,
) -> Result<Package, ProtocolError> {
    let values = update.params.values();
    let codec = fmt.compression.codec(values.len());
    let body = match codec {
        Codec::Dense => codec.encode(values, fmt.dtype)?,
        _ => {
            if reference.len() != values.len() {
                return Err(ProtocolError::Aggregate(AggregateError::LayoutMismatch));
            }
            let delta: Vec<f64> = values
                .iter()
                .zip(reference.values())
                .map(|(x, r)| x - r)
                .collect();
            codec.encode(&delta, fmt.dtype)?
        }
    };
    Ok(Package::control(MessageCode::ParameterUpdate, sender, receiver, round)
        .with_format(fmt.dtype, codec.tag())
        .with_slice(&body)
        .with_slice(&update.n_k.to_le_bytes()))
}

/// Update from an update message; compressed bodies are applied on top of
/// `reference`. The sender rank becomes the update's client id.
pub fn read_update(pkg: &Package, reference: &ModelParameters) -> Result<ClientUpdate, ProtocolError> {
    if pkg.code != MessageCode::ParameterUpdate || pkg.slice_count() != 2 {
        return Err(malformed(
            "update message",
            format!("{:?} with {} slices", pkg.code, pkg.slice_count()),
        ));
    }
    let body = decode_dense(pkg.slice(0).expect("two slices"), pkg.compression, pkg.dtype)?;
    let n_k_bytes: [u8; 8] = pkg
        .slice(1)
        .expect("two slices")
        .try_into()
        .map_err(|_| malformed("update message", "sample count is not 8 bytes"))?;
    if body.len() != reference.len() {
        return Err(ProtocolError::Aggregate(AggregateError::LayoutMismatch));
    }
    let values = match pkg.compression {
        CompressionTag::None => body,
        _ => body.iter().zip(reference.values()).map(|(d, r)| r + d).collect(),
    };
    Ok(ClientUpdate {
        client_id: pkg.sender,
        params: reference.with_values(values)?,
        n_k: u64::from_le_bytes(n_k_bytes),
        round_trained: pkg.round,
    })
}
