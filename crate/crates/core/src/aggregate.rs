//! Server-side optimization: weighted averaging, asynchronous mixing and
//! client sampling.

use thiserror::Error;

use crate::packaging::ModelParameters;
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("update layout does not match the global model")]
    LayoutMismatch,
    #[error("update from client {client_id} has zero samples")]
    ZeroWeight { client_id: u32 },
    #[error("invalid sampling spec: {0}")]
    BadSampleSpec(String),
    #[error("invalid mixing parameter: {0}")]
    BadParam(String),
    #[error("update trained at round {trained} but the server is at round {current}")]
    StaleUpdate { trained: u32, current: u32 },
    #[error("update trained at future round {trained}; server is at round {current}")]
    FutureUpdate { trained: u32, current: u32 },
    #[error("client {0} already reported this round")]
    DuplicateUpdate(u32),
    #[error("round already holds all {0} expected updates")]
    RoundFull(usize),
}

/// Locally trained parameters and the sample count that weights them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub params: ModelParameters,
    pub n_k: u64,
    pub round_trained: u32,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// Sample-count weighted average `Σ n_k w_k / Σ n_k`.
///
/// Each coordinate is accumulated with compensated summation and clamped to
/// the range spanned by the inputs, so identical models average to
/// themselves exactly.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ModelParameters, AggregateError> {
    let first = updates.first().ok_or(AggregateError::NoUpdates)?;
    let layout = first.params.layout();
    for u in updates {
        if u.params.layout() != layout {
            return Err(AggregateError::LayoutMismatch);
        }
        if u.n_k == 0 {
            return Err(AggregateError::ZeroWeight {
                client_id: u.client_id,
            });
        }
    }
    let total: f64 = updates.iter().map(|u| u.n_k as f64).sum();
    let dim = first.params.len();
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut acc = CompensatedSum::default();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for u in updates {
            let w = u.params.values()[j];
            acc.add(u.n_k as f64 * w);
            lo = lo.min(w);
            hi = hi.max(w);
        }
        out.push((acc.value() / total).clamp(lo, hi));
    }
    Ok(first.params.with_values(out).expect("layout checked"))
}

/// Staleness-discounted mixing weight `alpha * (staleness + 1)^(-exponent)`.
pub fn mixing_weight(alpha: f64, staleness: u32, exponent: f64) -> f64 {
    alpha * (f64::from(staleness) + 1.0).powf(-exponent)
}

/// `(1 - a_t) * global + a_t * incoming` with `a_t` from [`mixing_weight`].
pub fn async_mix(
    global: &ModelParameters,
    incoming: &ClientUpdate,
    alpha: f64,
    server_round: u32,
    staleness_exponent: f64,
) -> Result<ModelParameters, AggregateError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AggregateError::BadParam(format!("alpha {alpha}")));
    }
    if !(staleness_exponent >= 0.0 && staleness_exponent.is_finite()) {
        return Err(AggregateError::BadParam(format!(
            "staleness exponent {staleness_exponent}"
        )));
    }
    if incoming.params.layout() != global.layout() {
        return Err(AggregateError::LayoutMismatch);
    }
    if incoming.round_trained > server_round {
        return Err(AggregateError::FutureUpdate {
            trained: incoming.round_trained,
            current: server_round,
        });
    }
    let a = mixing_weight(alpha, server_round - incoming.round_trained, staleness_exponent);
    let mixed = global
        .values()
        .iter()
        .zip(incoming.params.values())
        .map(|(&g, &x)| (1.0 - a) * g + a * x)
        .collect();
    Ok(global.with_values(mixed).expect("layout checked"))
}

/// Number of clients drawn per round: `max(1, round_half_up(fraction * total))`.
pub fn sample_size(total: usize, fraction: f64) -> Result<usize, AggregateError> {
    if total < 1 {
        return Err(AggregateError::BadSampleSpec("no clients".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AggregateError::BadSampleSpec(format!("fraction {fraction}")));
    }
    let m = (fraction * total as f64 + 0.5).floor() as usize;
    Ok(m.clamp(1, total))
}

/// Ascending ids of a uniform sample without replacement from `0..total`.
pub fn sample_clients(
    total: usize,
    fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>, AggregateError> {
    let m = sample_size(total, fraction)?;
    Ok(rng.sample_distinct(total, m))
}

/// Synchronous parameter-server state: the global model and the updates
/// buffered for the current round.
#[derive(Debug, Clone)]
pub struct SyncHandlerState {
    global: ModelParameters,
    round: u32,
    expected: usize,
    buffer: Vec<ClientUpdate>,
}

impl SyncHandlerState {
    pub fn new(global: ModelParameters) -> Self {
        Self {
            global,
            round: 0,
            expected: 0,
            buffer: Vec::new(),
        }
    }

    pub fn global(&self) -> &ModelParameters {
        &self.global
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn expected(&self) -> usize {
        self.expected
    }

    pub fn buffered(&self) -> &[ClientUpdate] {
        &self.buffer
    }

    /// Sets how many updates close the current round and drops anything buffered.
    pub fn begin_round(&mut self, expected: usize) {
        self.expected = expected;
        self.buffer.clear();
    }

    pub fn clear_buffer(&mut self) {
        self.buffer.clear();
    }

    /// Buffers `update`; once `expected` updates are in, replaces the global
    /// model with their average (in client-id order), advances the round and
    /// returns `true`.
    pub fn receive(&mut self, update: ClientUpdate) -> Result<bool, AggregateError> {
        if update.round_trained < self.round {
            return Err(AggregateError::StaleUpdate {
                trained: update.round_trained,
                current: self.round,
            });
        }
        if update.round_trained > self.round {
            return Err(AggregateError::FutureUpdate {
                trained: update.round_trained,
                current: self.round,
            });
        }
        if update.params.layout() != self.global.layout() {
            return Err(AggregateError::LayoutMismatch);
        }
        if self.buffer.iter().any(|u| u.client_id == update.client_id) {
            return Err(AggregateError::DuplicateUpdate(update.client_id));
        }
        if self.buffer.len() >= self.expected {
            return Err(AggregateError::RoundFull(self.expected));
        }
        self.buffer.push(update);
        if self.buffer.len() < self.expected {
            return Ok(false);
        }
        self.buffer.sort_by_key(|u| u.client_id);
        self.global = fedavg(&self.buffer)?;
        self.buffer.clear();
        self.round += 1;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packaging::{DType, LayoutDescriptor};

    fn params(v: &[f64]) -> ModelParameters {
        ModelParameters::new(v.to_vec(), LayoutDescriptor::new(vec![vec![v.len()]], DType::F64))
            .unwrap()
    }

    fn upd(id: u32, n: u64, v: &[f64]) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: params(v),
            n_k: n,
            round_trained: 0,
        }
    }

    #[test]
    fn fedavg_examples() {
        let g = fedavg(&[upd(0, 5, &[0.0, 2.0]), upd(1, 5, &[2.0, 0.0])]).unwrap();
        assert_eq!(g.values(), &[1.0, 1.0]);
        let g = fedavg(&[upd(0, 1, &[0.0]), upd(1, 3, &[4.0])]).unwrap();
        assert_eq!(g.values(), &[3.0]);
    }

    #[test]
    fn fedavg_errors() {
        assert_eq!(fedavg(&[]), Err(AggregateError::NoUpdates));
        assert_eq!(
            fedavg(&[upd(0, 1, &[0.0]), upd(1, 1, &[0.0, 1.0])]),
            Err(AggregateError::LayoutMismatch)
        );
        assert_eq!(
            fedavg(&[upd(3, 0, &[0.0])]),
            Err(AggregateError::ZeroWeight { client_id: 3 })
        );
    }

    #[test]
    fn async_mix_examples() {
        let g = params(&[0.0]);
        let mut u = upd(0, 1, &[2.0]);
        assert_eq!(async_mix(&g, &u, 1.0, 0, 0.0).unwrap().values(), &[2.0]);
        assert_eq!(async_mix(&g, &u, 0.5, 0, 0.0).unwrap().values(), &[1.0]);

        assert!((mixing_weight(0.6, 3, 0.5) - 0.3).abs() < 1e-15);
        let g = params(&[1.0]);
        u.round_trained = 2;
        let mixed = async_mix(&g, &u, 0.6, 5, 0.5).unwrap();
        assert!((mixed.values()[0] - 1.3).abs() < 1e-15);

        assert_eq!(async_mix(&g, &u, 0.0, 5, 0.5).unwrap().values(), g.values());
        assert!(matches!(
            async_mix(&g, &u, 0.5, 1, 0.0),
            Err(AggregateError::FutureUpdate { .. })
        ));
        assert!(async_mix(&g, &u, 1.5, 5, 0.0).is_err());
        assert!(async_mix(&g, &u, 0.5, 5, -1.0).is_err());
    }

    #[test]
    fn sampling() {
        let mut rng = Rng::seed_from(0, &[]);
        assert_eq!(sample_clients(10, 1.0, &mut rng).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_clients(10, 0.05, &mut rng).unwrap().len(), 1);
        assert_eq!(sample_size(10, 0.25).unwrap(), 3);
        assert_eq!(sample_size(10, 0.3).unwrap(), 3);
        let a = sample_clients(100, 0.1, &mut Rng::seed_from(9, &[2])).unwrap();
        let b = sample_clients(100, 0.1, &mut Rng::seed_from(9, &[2])).unwrap();
        assert_eq!(a, b);
        assert!(sample_clients(0, 0.5, &mut rng).is_err());
        assert!(sample_clients(5, 0.0, &mut rng).is_err());
        assert!(sample_clients(5, 1.1, &mut rng).is_err());
    }

    #[test]
    fn sample_grid_sweep() {
        let mut rng = Rng::seed_from(1, &[]);
        for total in 1..60 {
            for step in 1..=20 {
                let c = step as f64 / 20.0;
                let s = sample_clients(total, c, &mut rng).unwrap();
                let expect = ((c * total as f64 + 0.5).floor() as usize).clamp(1, total);
                assert_eq!(s.len(), expect);
                assert!(s.windows(2).all(|w| w[0] < w[1]));
                assert!(s.iter().all(|&i| i < total));
            }
        }
    }

    #[test]
    fn handler_round_flow() {
        let mut h = SyncHandlerState::new(params(&[0.0]));
        h.begin_round(2);
        assert!(!h.receive(upd(1, 3, &[4.0])).unwrap());
        assert_eq!(h.receive(upd(1, 3, &[4.0])), Err(AggregateError::DuplicateUpdate(1)));
        assert!(h.receive(upd(0, 1, &[0.0])).unwrap());
        assert_eq!(h.global().values(), &[3.0]);
        assert_eq!(h.round(), 1);
        assert!(h.buffered().is_empty());

        h.begin_round(1);
        assert!(matches!(h.receive(upd(0, 1, &[1.0])), Err(AggregateError::StaleUpdate { .. })));
        let mut future = upd(0, 1, &[1.0]);
        future.round_trained = 2;
        assert!(matches!(h.receive(future), Err(AggregateError::FutureUpdate { .. })));
    }
}
