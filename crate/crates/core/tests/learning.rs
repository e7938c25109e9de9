use fedsim::aggregate::{async_mix, fedavg, sample_clients, sample_size, ClientUpdate};
use fedsim::data::synth_train_test;
use fedsim::packaging::{DType, LayoutDescriptor, ModelParameters};
use fedsim::rng::Rng;
use fedsim::trainer::{backward, evaluate, forward_loss, local_train, ModelSpec, TrainConfig};
use proptest::prelude::*;

fn random_spec(rng: &mut Rng) -> ModelSpec {
    let d = 1 + rng.below(6) as usize;
    let c = 2 + rng.below(4) as usize;
    if rng.below(2) == 0 {
        ModelSpec::logistic(d, c)
    } else {
        ModelSpec::mlp1(d, 1 + rng.below(6) as usize, c)
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = Rng::seed_from(11, &[300]);
    let h = 1e-5;
    for config in 0..20 {
        let spec = random_spec(&mut rng);
        let batch = 1 + rng.below(8) as usize;
        let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.normal()).collect();
        let x: Vec<f64> = (0..batch * spec.input).map(|_| rng.normal() * 2.0).collect();
        let y: Vec<u32> = (0..batch).map(|_| rng.below(spec.classes as u64) as u32).collect();
        let g = backward(&spec, &params, &x, &y).unwrap();
        for j in 0..params.len() {
            let mut p = params.clone();
            p[j] = params[j] + h;
            let up = forward_loss(&spec, &p, &x, &y).unwrap().0;
            p[j] = params[j] - h;
            let down = forward_loss(&spec, &p, &x, &y).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-4);
            assert!(rel <= 1e-5, "config {config} {spec:?} coord {j}: {} vs {fd}", g[j]);
        }
    }
}

#[test]
fn single_step_equals_explicit_sgd() {
    let (train, _) = synth_train_test(40, 3, 3, 2.0, 1).unwrap();
    let spec = ModelSpec::mlp1(3, 4, 3);
    let params = spec.init(2).unwrap();
    let indices: Vec<usize> = (5..15).collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 10,
        lr: 0.3,
        ..TrainConfig::default()
    };
    let u = local_train(&spec, &params, &train, &indices, &cfg, 4, 0).unwrap();
    let (x, y) = train.gather(&indices);
    let g = backward(&spec, params.values(), &x, &y).unwrap();
    let expect: Vec<f64> = params.values().iter().zip(&g).map(|(w, g)| w - 0.3 * g).collect();
    for (a, b) in u.params.values().iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
    }
    assert_eq!(u.n_k, 10);
    let again = local_train(&spec, &params, &train, &indices, &cfg, 4, 0).unwrap();
    assert_eq!(again, u);
}

#[test]
fn central_training_separates_blobs() {
    let (train, test) = synth_train_test(2000, 10, 4, 6.0, 21).unwrap();
    let spec = ModelSpec::logistic(10, 4);
    let all: Vec<usize> = (0..train.len()).collect();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let u = local_train(&spec, &spec.init(21).unwrap(), &train, &all, &cfg, 0, 0).unwrap();
    let (_, acc) = evaluate(&spec, &u.params, &test).unwrap();
    assert!(acc >= 0.99, "central accuracy {acc}");
}

fn params(v: Vec<f64>) -> ModelParameters {
    let n = v.len();
    ModelParameters::new(v, LayoutDescriptor::new(vec![vec![n]], DType::F64)).unwrap()
}

fn random_updates(rng: &mut Rng, dim: usize, k: usize) -> Vec<ClientUpdate> {
    (0..k)
        .map(|i| ClientUpdate {
            client_id: i as u32,
            params: params((0..dim).map(|_| rng.normal() * 10.0).collect()),
            n_k: 1 + rng.below(1000),
            round_trained: 0,
        })
        .collect()
}

/// Plain weighted mean with every step spelled out.
fn fedavg_oracle(updates: &[ClientUpdate]) -> Vec<f64> {
    let dim = updates[0].params.len();
    let mut total = 0.0;
    for u in updates {
        total += u.n_k as f64;
    }
    let mut out = vec![0.0; dim];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for u in updates {
            acc += u.n_k as f64 / total * u.params.values()[j];
        }
        *slot = acc;
    }
    out
}

#[test]
fn fedavg_properties_on_random_instances() {
    let mut rng = Rng::seed_from(13, &[301]);
    for _ in 0..100 {
        let dim = 1 + rng.below(20) as usize;
        let k = 1 + rng.below(12) as usize;
        let updates = random_updates(&mut rng, dim, k);
        let avg = fedavg(&updates).unwrap();
        let oracle = fedavg_oracle(&updates);
        for (j, (&a, &o)) in avg.values().iter().zip(&oracle).enumerate() {
            let scale = updates.iter().map(|u| u.params.values()[j].abs()).fold(1.0, f64::max);
            assert!((a - o).abs() <= 1e-12 * scale, "oracle {a} vs {o}");
            let lo = updates.iter().map(|u| u.params.values()[j]).fold(f64::INFINITY, f64::min);
            let hi = updates.iter().map(|u| u.params.values()[j]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= a && a <= hi);
        }

        let mut shuffled = updates.clone();
        rng.shuffle(&mut shuffled);
        let perm = fedavg(&shuffled).unwrap();
        for (&a, &b) in avg.values().iter().zip(perm.values()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300), "{a} vs {b}");
        }

        let c = rng.uniform_range(-3.0, 3.0);
        let scaled: Vec<ClientUpdate> = updates
            .iter()
            .map(|u| ClientUpdate {
                params: params(u.params.values().iter().map(|x| c * x).collect()),
                ..u.clone()
            })
            .collect();
        let lin = fedavg(&scaled).unwrap();
        for (&a, &b) in avg.values().iter().zip(lin.values()) {
            assert!((c * a - b).abs() <= 1e-12 * (c * a).abs().max(1e-12));
        }

        let same: Vec<ClientUpdate> = updates
            .iter()
            .map(|u| ClientUpdate {
                params: updates[0].params.clone(),
                ..u.clone()
            })
            .collect();
        assert_eq!(fedavg(&same).unwrap(), updates[0].params);
    }
}

#[test]
fn sample_grid() {
    let mut rng = Rng::seed_from(17, &[302]);
    for k in 1..=60usize {
        for step in 1..=20 {
            let c = step as f64 / 20.0;
            let s = sample_clients(k, c, &mut rng).unwrap();
            let m = ((c * k as f64 + 0.5).floor() as usize).clamp(1, k);
            assert_eq!(s.len(), m);
            assert_eq!(sample_size(k, c).unwrap(), m);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&i| i < k));
        }
    }
}

#[test]
fn async_mix_identity_and_replacement() {
    let g = params(vec![1.0, -2.0]);
    let u = ClientUpdate {
        client_id: 1,
        params: params(vec![5.0, 7.0]),
        n_k: 3,
        round_trained: 2,
    };
    assert_eq!(async_mix(&g, &u, 0.0, 4, 1.0).unwrap(), g);
    assert_eq!(async_mix(&g, &u, 1.0, 2, 0.5).unwrap(), u.params);
    let m = async_mix(&g, &u, 0.5, 5, 1.0).unwrap();
    // staleness 3 gives alpha_t = 0.5 / 4
    assert_eq!(m.values()[0], (1.0 - 0.125) * 1.0 + 0.125 * 5.0);
}

proptest! {
    #[test]
    fn training_is_deterministic(seed in any::<u64>(), client in 0u32..50, round in 0u32..50) {
        let (train, _) = synth_train_test(60, 2, 2, 1.0, seed).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        let idx: Vec<usize> = (0..30).collect();
        let cfg = TrainConfig { epochs: 1, seed, ..TrainConfig::default() };
        let p = spec.init(seed).unwrap();
        let a = local_train(&spec, &p, &train, &idx, &cfg, client, round).unwrap();
        let b = local_train(&spec, &p, &train, &idx, &cfg, client, round).unwrap();
        prop_assert_eq!(a.params.values(), b.params.values());
        prop_assert_eq!(a.n_k, 30);
    }
}
