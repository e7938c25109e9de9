//! Federated learning simulation: model packaging, wire format, aggregation,
//! compression, local training, data partitioning, round protocols and
//! transports.

pub mod aggregate;
pub mod compress;
pub mod data;
pub mod packaging;
pub mod partition;
pub mod protocol;
pub mod rng;
pub mod trainer;
pub mod transport;
