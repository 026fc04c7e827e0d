mod common;

use common::*;
use edgemix::backbone::{AdamConfig, EdgeNetwork, NetworkConfig, Trainer};
use edgemix::racmix::RacmixConfig;
use edgemix::tensor::Tensor;
use edgemix::Error;

fn small() -> NetworkConfig {
    NetworkConfig {
        channels: vec![4, 4, 8, 8, 8],
        subblocks: vec![1, 2, 1, 1, 1],
        downsample: vec![1, 2, 4, 8, 16],
        racmix: RacmixConfig {
            channels: 4,
            heads: 2,
            kernel_size: 3,
            window_radius: 1,
        },
        ..NetworkConfig::default()
    }
}

fn image(size: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform([3, size, size], 0.0, 1.0, &mut rng(seed))
}

#[test]
fn same_seed_same_parameters() {
    let a = EdgeNetwork::<f32>::build(small(), 5).unwrap();
    let b = EdgeNetwork::<f32>::build(small(), 5).unwrap();
    let c = EdgeNetwork::<f32>::build(small(), 6).unwrap();
    assert_eq!(a.store, b.store);
    assert_ne!(a.store, c.store);
    let x = image(32, 1);
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
}

#[test]
fn default_network_runs_on_64() {
    let net = EdgeNetwork::<f32>::build(NetworkConfig::default(), 0).unwrap();
    assert!(net.param_count() > 0);
    let out = net.predict(&image(64, 2)).unwrap();
    assert_eq!(out.sides.len(), 6);
    for m in out.sides.iter().chain([&out.fused]) {
        assert_eq!(m.shape(), [1, 64, 64]);
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn config_rejections() {
    let mut cfg = small();
    cfg.side_outputs = 5;
    assert!(matches!(
        EdgeNetwork::<f32>::build(cfg, 0),
        Err(Error::Config(_))
    ));
    let mut cfg = small();
    cfg.racmix.heads = 3;
    assert!(matches!(
        EdgeNetwork::<f32>::build(cfg, 0),
        Err(Error::Config(_))
    ));
    let net = EdgeNetwork::<f32>::build(small(), 0).unwrap();
    assert!(matches!(
        net.predict(&image(24, 0)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn zeroed_head_emits_one_half() {
    let mut net = EdgeNetwork::<f32>::build(small(), 3).unwrap();
    for id in net.head_params(4) {
        let z = Tensor::zeros(net.store.get(id).shape().to_vec());
        net.store.set(id, z).unwrap();
    }
    let out = net.predict(&image(32, 3)).unwrap();
    assert!(out.sides[3].data().iter().all(|&v| v == 0.5));
}

#[test]
fn heads_are_independent() {
    let net = EdgeNetwork::<f32>::build(small(), 4).unwrap();
    let x = image(32, 4);
    let base = net.predict(&x).unwrap();
    let mut ids = std::collections::HashSet::new();
    for h in 1..=6 {
        for id in net.head_params(h) {
            assert!(ids.insert(id), "head {h} shares a parameter");
        }
        let mut m = net.clone();
        let [w, _] = m.head_params(h);
        let bumped = m.store.get(w).map(|v| v + 0.5);
        m.store.set(w, bumped).unwrap();
        let out = m.predict(&x).unwrap();
        for j in 0..6 {
            if j + 1 == h {
                assert_ne!(out.sides[j], base.sides[j]);
            } else {
                assert_eq!(
                    out.sides[j],
                    base.sides[j],
                    "head {h} changed side {}",
                    j + 1
                );
            }
        }
        assert_ne!(out.fused, base.fused);
    }
}

#[test]
fn stem_reaches_every_side() {
    let net = EdgeNetwork::<f32>::build(small(), 7).unwrap();
    let x = image(32, 7);
    let base = net.predict(&x).unwrap();
    let mut m = net.clone();
    let [w, _] = m.stem_params();
    let bumped = m.store.get(w).map(|v| v * 1.1 + 0.01);
    m.store.set(w, bumped).unwrap();
    let out = m.predict(&x).unwrap();
    for j in 0..6 {
        assert_ne!(out.sides[j], base.sides[j], "side {}", j + 1);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = EdgeNetwork::<f32>::build(small(), 8).unwrap();
    net.save(&path, 12).unwrap();
    let (back, step) = EdgeNetwork::load(&path).unwrap();
    assert_eq!(step, 12);
    assert_eq!(back.store, net.store);
    let x = image(32, 8);
    assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());

    let mut other = small();
    other.channels[4] = 16;
    assert!(matches!(
        EdgeNetwork::load_expecting(&path, &other),
        Err(Error::Checkpoint(_))
    ));
    assert!(EdgeNetwork::load_expecting(&path, &small()).is_ok());
}

#[test]
fn train_step_contracts() {
    let net = EdgeNetwork::<f32>::build(small(), 9).unwrap();
    let mut tr = Trainer::new(
        net,
        AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
    );
    let s = edgemix::synth::shape_scene(32, 3, 9);
    let before = tr.net.store.clone();
    let r = tr.train_step(&[(s.image.clone(), s.gt.clone())]).unwrap();
    assert_eq!(tr.step_count(), 1);
    assert_ne!(tr.net.store, before);
    assert!((r.loss - (r.fused + r.sides.iter().sum::<f64>())).abs() < 1e-6 * r.loss);

    let bad_gt = s.gt.map(|v| v * 0.5);
    assert!(matches!(
        tr.train_step(&[(s.image.clone(), bad_gt)]),
        Err(Error::Data(_))
    ));
    assert!(matches!(tr.train_step(&[]), Err(Error::Contract(_))));
}
