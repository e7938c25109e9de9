use std::sync::Arc;

use fedsim::aggregate::ClientUpdate;
use fedsim::data::{synth_train_test, Dataset};
use fedsim::packaging::{DType, LayoutDescriptor, ModelParameters};
use fedsim::partition::{iid_partition, PartitionMap};
use fedsim::protocol::actors::{AsyncClientActor, SchedulerActor, SyncClientActor};
use fedsim::protocol::{
    async_server_run, sync_server_round, update_package, AsyncClient,
    AsyncConfig, AsyncServer, Compression, RankMap, Scheduler, SchedulerConfig, SchedulerMode,
    SyncClient, SyncServer, WireFormat,
};
use fedsim::rng::{stream, Rng};
use fedsim::trainer::{LocalTrainer, ModelSpec, TrainConfig};
use fedsim::transport::sim::SimNet;

const K: u32 = 10;

struct Setup {
    spec: ModelSpec,
    data: Arc<Dataset>,
    partition: PartitionMap,
    cfg: TrainConfig,
}

fn setup() -> Setup {
    let (train, _) = synth_train_test(1000, 6, 3, 3.0, 31).unwrap();
    Setup {
        spec: ModelSpec::mlp1(6, 8, 3),
        partition: iid_partition(train.len(), K as usize, 31).unwrap(),
        data: Arc::new(train),
        cfg: TrainConfig {
            epochs: 2,
            seed: 31,
            ..TrainConfig::default()
        },
    }
}

impl Setup {
    fn trainer(&self, id: u32) -> LocalTrainer {
        LocalTrainer {
            spec: self.spec,
            data: self.data.clone(),
            indices: self.partition.client(id).unwrap().to_vec(),
            cfg: self.cfg,
            client_id: id,
        }
    }

    fn layout(&self) -> LayoutDescriptor {
        self.spec.layout()
    }
}

/// Runs `rounds` sync rounds. `groups == 0` means a flat topology.
#[allow(clippy::manual_checked_ops)]
fn run_sync(s: &Setup, rounds: u32, groups: u32, mode: SchedulerMode, fmt: WireFormat) -> Vec<ModelParameters> {
    let net = SimNet::new();
    let mut server_ep = net.endpoint(0, 0).unwrap();
    let mut server_clients: Vec<u32> = (1..=K).collect();
    if groups == 0 {
        for id in 0..K {
            let c = SyncClient::new(s.trainer(id), id + 1, s.layout(), fmt);
            net.attach(Box::new(SyncClientActor::new(c)), &[(0, id + 1)]).unwrap();
        }
    } else {
        let per = K / groups;
        if mode == SchedulerMode::MiddleAggregate {
            server_clients = (0..groups).map(|g| K + 1 + g).collect();
        }
        for g in 0..groups {
            let ranks: Vec<u32> = (g * per + 1..=(g + 1) * per).collect();
            let up_rank = K + 1 + g;
            let sched = Scheduler::new(SchedulerConfig {
                group_id: g,
                upstream_rank: up_rank,
                map: RankMap::identity(&ranks),
                mode,
                fmt,
                layout: s.layout(),
            })
            .unwrap();
            net.attach(Box::new(SchedulerActor(sched)), &[(0, up_rank), (g + 1, 0)]).unwrap();
            if mode == SchedulerMode::Forward {
                for &r in &ranks {
                    net.alias(0, r, 0, up_rank).unwrap();
                }
            }
            for &r in &ranks {
                let c = SyncClient::new(s.trainer(r - 1), r, s.layout(), fmt);
                net.attach(Box::new(SyncClientActor::new(c)), &[(g + 1, r)]).unwrap();
            }
        }
    }
    let mut server = SyncServer::new(s.spec.init(31).unwrap(), server_clients, 1.0, fmt);
    let mut out = Vec::new();
    for r in 0..rounds {
        let mut rng = Rng::seed_from(31, &[stream::SAMPLE, r.into()]);
        sync_server_round(&mut server, &mut server_ep, &mut rng).unwrap();
        out.push(server.global().clone());
    }
    out
}

fn max_rel(a: &ModelParameters, b: &ModelParameters) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

#[test]
fn sync_trajectory_is_deterministic() {
    let s = setup();
    let a = run_sync(&s, 3, 0, SchedulerMode::Forward, WireFormat::default());
    let b = run_sync(&s, 3, 0, SchedulerMode::Forward, WireFormat::default());
    assert_eq!(a, b);
    assert_ne!(a[0], a[1]);
}

#[test]
fn middle_aggregation_matches_flat() {
    let s = setup();
    let flat = run_sync(&s, 3, 0, SchedulerMode::Forward, WireFormat::default());
    let grouped = run_sync(&s, 3, 2, SchedulerMode::MiddleAggregate, WireFormat::default());
    for (f, g) in flat.iter().zip(&grouped) {
        assert!(max_rel(f, g) <= 1e-12, "{}", max_rel(f, g));
    }
    let uneven = run_sync(&s, 1, 5, SchedulerMode::MiddleAggregate, WireFormat::default());
    assert!(max_rel(&flat[0], &uneven[0]) <= 1e-12);
}

#[test]
fn forwarding_matches_flat_exactly() {
    let s = setup();
    let fmt = WireFormat {
        dtype: DType::F32,
        compression: Compression::TopK { fraction: 0.1 },
    };
    let flat = run_sync(&s, 2, 0, SchedulerMode::Forward, fmt);
    let fwd = run_sync(&s, 2, 2, SchedulerMode::Forward, fmt);
    assert_eq!(flat, fwd);
}

fn run_async(s: &Setup, updates: u32) -> (ModelParameters, Vec<u32>) {
    let net = SimNet::new();
    let mut ep = net.endpoint(0, 0).unwrap();
    for id in 0..4 {
        let c = AsyncClient::new(s.trainer(id), id + 1, s.layout(), WireFormat::default());
        net.attach(Box::new(AsyncClientActor::new(c)), &[(0, id + 1)]).unwrap();
    }
    net.start().unwrap();
    let mut server = AsyncServer::new(s.spec.init(31).unwrap(), 1..=4, updates, AsyncConfig::default(), WireFormat::default());
    let events = async_server_run(&mut server, &mut ep).unwrap();
    (server.global().clone(), events.iter().map(|e| e.staleness).collect())
}

#[test]
fn async_over_sim_is_repeatable() {
    let s = setup();
    let (a, stale_a) = run_async(&s, 12);
    let (b, stale_b) = run_async(&s, 12);
    assert_eq!(a, b);
    assert_eq!(stale_a, stale_b);
    assert_eq!(stale_a.len(), 12);
    assert!(stale_a.iter().any(|&x| x > 0));
}

#[test]
fn scripted_async_order_sensitivity() {
    let layout = LayoutDescriptor::new(vec![vec![3]], DType::F64);
    let mut rng = Rng::seed_from(37, &[500]);
    let script: Vec<(u32, Vec<f64>, u64)> = (0..50)
        .map(|_| {
            (
                1 + rng.below(5) as u32,
                (0..3).map(|_| rng.normal()).collect(),
                1 + rng.below(100),
            )
        })
        .collect();
    let replay = |order: &[usize]| {
        let g0 = ModelParameters::new(vec![0.0; 3], layout.clone()).unwrap();
        let mut server = AsyncServer::new(g0, 1..=5, 50, AsyncConfig::default(), WireFormat::default());
        for &i in order {
            let (from, w, n_k) = &script[i];
            let (out, _) = server
                .handle(fedsim::packaging::Package::control(
                    fedsim::packaging::MessageCode::ParameterRequest,
                    *from,
                    0,
                    server.round(),
                ))
                .unwrap();
            let round = out[0].round;
            let u = ClientUpdate {
                client_id: *from,
                params: ModelParameters::new(w.clone(), layout.clone()).unwrap(),
                n_k: *n_k,
                round_trained: round,
            };
            let reference = fedsim::protocol::read_model(&out[0], &layout).unwrap();
            let pkg = update_package(*from, 0, round, &u, &reference, WireFormat::default()).unwrap();
            server.handle(pkg).unwrap();
        }
        server.global().clone()
    };
    let order: Vec<usize> = (0..50).collect();
    let first = replay(&order);
    assert_eq!(first.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        replay(&order).values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let mut permuted = order.clone();
    permuted.swap(0, 49);
    assert_ne!(replay(&permuted), first);
}
