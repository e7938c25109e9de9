//! Adapters that let the protocol state machines run inside a [`SimNet`].
//!
//! [`SimNet`]: crate::transport::sim::SimNet

use crate::packaging::Package;
use crate::trainer::Trainer;
use crate::transport::sim::{ActorResult, SimActor};

use super::sync::ClientPhase;
use super::{AsyncClient, Scheduler, Side, SyncClient};

fn on_port0(out: Vec<Package>) -> ActorResult {
    Ok(out.into_iter().map(|p| (0, p)).collect())
}

/// Synchronous client on a single port.
pub struct SyncClientActor<T>(pub SyncClient<T>);

impl<T: Trainer> SyncClientActor<T> {
    pub fn new(client: SyncClient<T>) -> Self {
        Self(client)
    }
}

impl<T: Trainer> SimActor for SyncClientActor<T> {
    fn on_package(&mut self, _port: usize, pkg: Package) -> ActorResult {
        on_port0(self.0.handle(pkg)?)
    }

    fn is_done(&self) -> bool {
        self.0.phase() == ClientPhase::Exited
    }
}

/// Asynchronous client on a single port; sends its first request on start.
pub struct AsyncClientActor<T>(pub AsyncClient<T>);

impl<T: Trainer> AsyncClientActor<T> {
    pub fn new(client: AsyncClient<T>) -> Self {
        Self(client)
    }
}

impl<T: Trainer> SimActor for AsyncClientActor<T> {
    fn on_start(&mut self) -> ActorResult {
        on_port0(self.0.on_start())
    }

    fn on_package(&mut self, _port: usize, pkg: Package) -> ActorResult {
        on_port0(self.0.handle(pkg)?)
    }

    fn is_done(&self) -> bool {
        self.0.phase() == ClientPhase::Exited
    }
}

/// Scheduler with port 0 facing the server and port 1 facing its group.
pub struct SchedulerActor(pub Scheduler);

impl SimActor for SchedulerActor {
    fn on_package(&mut self, port: usize, pkg: Package) -> ActorResult {
        let side = if port == 0 { Side::Up } else { Side::Down };
        let out = self.0.handle(side, pkg)?;
        Ok(out
            .into_iter()
            .map(|(side, p)| (if side == Side::Up { 0 } else { 1 }, p))
            .collect())
    }

    fn is_done(&self) -> bool {
        self.0.is_done()
    }
}
