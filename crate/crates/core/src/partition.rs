//! Splitting a dataset's index space across clients.
//!
//! Schemes: IID, label-sorted shards, Dirichlet label skew and Dirichlet
//! quantity skew. Every scheme is a pure function of its inputs and seed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, Rng};

pub const DEFAULT_MAX_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("{n} samples cannot cover {clients} clients")]
    TooFewSamples { n: usize, clients: usize },
    #[error("invalid shard spec: {0}")]
    BadShardSpec(String),
    #[error("invalid partition parameter: {0}")]
    BadParam(String),
    #[error("no partition with at least {min_size} samples per client after {retries} attempts")]
    PartitionInfeasible { min_size: usize, retries: usize },
    #[error("invalid partition map: {0}")]
    Invalid(String),
    #[error("partition file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Client id → ascending sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMap {
    pub n_total: usize,
    pub assignments: BTreeMap<u32, Vec<usize>>,
}

impl PartitionMap {
    /// Sorts each client's indices and checks the disjoint-cover invariant.
    pub fn new(n_total: usize, mut assignments: BTreeMap<u32, Vec<usize>>) -> Result<Self, PartitionError> {
        for v in assignments.values_mut() {
            v.sort_unstable();
        }
        let map = Self {
            n_total,
            assignments,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        let mut seen = vec![false; self.n_total];
        for (client, idx) in &self.assignments {
            if !idx.windows(2).all(|w| w[0] < w[1]) {
                return Err(PartitionError::Invalid(format!(
                    "client {client} indices are not strictly increasing"
                )));
            }
            for &i in idx {
                match seen.get_mut(i) {
                    None => {
                        return Err(PartitionError::Invalid(format!(
                            "index {i} outside 0..{}",
                            self.n_total
                        )))
                    }
                    Some(true) => {
                        return Err(PartitionError::Invalid(format!("index {i} assigned twice")))
                    }
                    Some(s) => *s = true,
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(PartitionError::Invalid(format!("index {missing} unassigned")));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client(&self, id: u32) -> Option<&[usize]> {
        self.assignments.get(&id).map(Vec::as_slice)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.values().map(Vec::len).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PartitionError> {
        let map: PartitionMap = serde_json::from_str(text)?;
        Self::new(map.n_total, map.assignments)
    }
}

fn from_chunks(n_total: usize, chunks: Vec<Vec<usize>>) -> PartitionMap {
    let assignments = chunks
        .into_iter()
        .enumerate()
        .map(|(i, mut v)| {
            v.sort_unstable();
            (i as u32, v)
        })
        .collect();
    PartitionMap {
        n_total,
        assignments,
    }
}

/// Uniform random permutation cut into `num_clients` contiguous chunks; the
/// first `n % num_clients` chunks get one extra sample.
pub fn iid_partition(n: usize, num_clients: usize, seed: u64) -> Result<PartitionMap, PartitionError> {
    if num_clients == 0 || n < num_clients {
        return Err(PartitionError::TooFewSamples {
            n,
            clients: num_clients,
        });
    }
    let mut rng = Rng::seed_from(seed, &[stream::PARTITION, 0]);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let (base, extra) = (n / num_clients, n % num_clients);
    let mut chunks = Vec::with_capacity(num_clients);
    let mut start = 0;
    for i in 0..num_clients {
        let len = base + usize::from(i < extra);
        chunks.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(from_chunks(n, chunks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub num_shards: usize,
    pub shards_per_client: usize,
    /// Explicit shard size; defaults to `n / num_shards`. When given, it
    /// must satisfy `num_shards * shard_size == n`.
    pub shard_size: Option<usize>,
}

/// Label-sorted shards dealt to clients at random.
///
/// Indices are stably sorted by label, cut into `num_shards` equal shards,
/// and each of the `num_shards / shards_per_client` clients receives
/// `shards_per_client` shards drawn without replacement.
pub fn shard_partition(labels: &[u32], spec: ShardSpec, seed: u64) -> Result<PartitionMap, PartitionError> {
    let n = labels.len();
    let ShardSpec {
        num_shards,
        shards_per_client,
        shard_size,
    } = spec;
    if num_shards == 0 || shards_per_client == 0 {
        return Err(PartitionError::BadShardSpec("shard counts must be positive".into()));
    }
    if num_shards % shards_per_client != 0 {
        return Err(PartitionError::BadShardSpec(format!(
            "{num_shards} shards are not divisible into groups of {shards_per_client}"
        )));
    }
    let size = shard_size.unwrap_or(n / num_shards);
    if size == 0 || num_shards.checked_mul(size) != Some(n) {
        return Err(PartitionError::BadShardSpec(format!(
            "{num_shards} shards of size {size} do not tile {n} samples"
        )));
    }
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by_key(|&i| labels[i]);
    let mut order: Vec<usize> = (0..num_shards).collect();
    Rng::seed_from(seed, &[stream::PARTITION, 1]).shuffle(&mut order);
    let chunks = order
        .chunks(shards_per_client)
        .map(|shards| {
            shards
                .iter()
                .flat_map(|&s| sorted[s * size..(s + 1) * size].iter().copied())
                .collect()
        })
        .collect();
    Ok(from_chunks(n, chunks))
}

/// Cut points splitting `len` items by the simplex point `p`.
fn proportional_cuts(p: &[f64], len: usize) -> Vec<usize> {
    let mut cum = 0.0;
    let mut cuts: Vec<usize> = p
        .iter()
        .map(|&pi| {
            cum += pi;
            ((cum * len as f64).floor() as usize).min(len)
        })
        .collect();
    if let Some(last) = cuts.last_mut() {
        *last = len;
    }
    cuts
}

fn check_dirichlet(num_clients: usize, beta: f64) -> Result<(), PartitionError> {
    if num_clients == 0 {
        return Err(PartitionError::BadParam("no clients".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(PartitionError::BadParam(format!("beta {beta}")));
    }
    Ok(())
}

/// Per-class Dirichlet label skew.
///
/// For every class, its shuffled indices are split across clients by a
/// fresh Dirichlet(beta) draw. The whole assignment is redrawn, up to
/// `max_retries` times, until every client holds at least `min_size` samples.
pub fn dirichlet_label_partition(
    labels: &[u32],
    num_clients: usize,
    beta: f64,
    seed: u64,
    min_size: usize,
    max_retries: usize,
) -> Result<PartitionMap, PartitionError> {
    check_dirichlet(num_clients, beta)?;
    let n = labels.len();
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = Rng::seed_from(seed, &[stream::PARTITION, 2]);
    for _ in 0..max_retries.max(1) {
        let mut chunks = vec![Vec::new(); num_clients];
        for members in by_class.values() {
            let mut members = members.clone();
            rng.shuffle(&mut members);
            let p = rng
                .dirichlet(beta, num_clients)
                .map_err(|e| PartitionError::BadParam(e.to_string()))?;
            let mut start = 0;
            for (client, end) in proportional_cuts(&p, members.len()).into_iter().enumerate() {
                chunks[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if chunks.iter().all(|c| c.len() >= min_size) {
            return Ok(from_chunks(n, chunks));
        }
    }
    Err(PartitionError::PartitionInfeasible {
        min_size,
        retries: max_retries,
    })
}

/// Client sizes proportional to a Dirichlet(beta) draw over a random
/// permutation of `0..n`, redrawn until every client has `min_size` samples.
pub fn quantity_skew_partition(
    n: usize,
    num_clients: usize,
    beta: f64,
    seed: u64,
    min_size: usize,
    max_retries: usize,
) -> Result<PartitionMap, PartitionError> {
    check_dirichlet(num_clients, beta)?;
    let mut rng = Rng::seed_from(seed, &[stream::PARTITION, 3]);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    for _ in 0..max_retries.max(1) {
        let p = rng
            .dirichlet(beta, num_clients)
            .map_err(|e| PartitionError::BadParam(e.to_string()))?;
        let cuts = proportional_cuts(&p, n);
        let mut start = 0;
        let chunks: Vec<Vec<usize>> = cuts
            .into_iter()
            .map(|end| {
                let c = perm[start..end].to_vec();
                start = end;
                c
            })
            .collect();
        if chunks.iter().all(|c| c.len() >= min_size) {
            return Ok(from_chunks(n, chunks));
        }
    }
    Err(PartitionError::PartitionInfeasible {
        min_size,
        retries: max_retries,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClientSummary {
    pub client: u32,
    pub size: usize,
    /// Sample count per label `0..num_classes`.
    pub histogram: Vec<usize>,
}

impl ClientSummary {
    pub fn distinct_labels(&self) -> usize {
        self.histogram.iter().filter(|&&c| c > 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionReport {
    pub n_total: usize,
    pub num_classes: usize,
    pub clients: Vec<ClientSummary>,
}

/// Per-client sizes and label histograms.
pub fn partition_report(map: &PartitionMap, labels: &[u32]) -> PartitionReport {
    let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let clients = map
        .assignments
        .iter()
        .map(|(&client, idx)| {
            let mut histogram = vec![0; num_classes];
            for &i in idx {
                if let Some(&l) = labels.get(i) {
                    histogram[l as usize] += 1;
                }
            }
            ClientSummary {
                client,
                size: idx.len(),
                histogram,
            }
        })
        .collect();
    PartitionReport {
        n_total: map.n_total,
        num_classes,
        clients,
    }
}

impl fmt::Display for PartitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} samples over {} clients, {} classes",
            self.n_total,
            self.clients.len(),
            self.num_classes
        )?;
        writeln!(f, "{:>6} {:>8} {:>6}  histogram", "client", "size", "labels")?;
        for c in &self.clients {
            let hist: Vec<String> = c.histogram.iter().map(usize::to_string).collect();
            writeln!(
                f,
                "{:>6} {:>8} {:>6}  [{}]",
                c.client,
                c.size,
                c.distinct_labels(),
                hist.join(" ")
            )?;
        }
        Ok(())
    }
}
