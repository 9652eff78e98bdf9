mod support;

use ebcn_core::network::aggregate_energy;
use ebcn_core::{checkpoint, ConstraintNetwork, EmbeddingSequence, Error, NetworkConfig};
use ebcn_diff::Tape;
use proptest::prelude::*;
use support::{network_grad_check, objective, random_seq, tiny_net};

fn zero(net: &mut ConstraintNetwork, name: &str) {
    net.param_mut(name).unwrap().data_mut().fill(0.0);
}

fn energies(net: &ConstraintNetwork, s: &EmbeddingSequence) -> Vec<f64> {
    net.forward(s).unwrap().per_position
}

#[test]
fn full_network_grad_check_over_ten_seeds() {
    let started = std::time::Instant::now();
    for seed in 0..10 {
        for (name, r) in network_grad_check(seed) {
            assert!(r.passed, "seed {seed} {name}: {r:?}");
        }
    }
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn every_parameter_receives_gradient() {
    let net = tiny_net(3);
    let a = random_seq("a", 7, 8, 1);
    let (xt, segs) = net.stack(&[&a]).unwrap();
    let mut tape = Tape::new();
    let p = net.register(&mut tape, true).unwrap();
    let x = tape.constant(xt).unwrap();
    let y = objective(&net, &mut tape, &p, x, &segs).unwrap();
    let g = tape.backward(y).unwrap();
    for (param, v) in net.params().iter().zip(&p) {
        let grad = g.get(*v).unwrap_or_else(|| panic!("{} has no gradient", param.name));
        assert!(
            grad.data().iter().any(|v| *v != 0.0),
            "{} gradient is all zero",
            param.name
        );
    }
}

#[test]
fn ssm_only_network_is_causal() {
    let mut net = tiny_net(5);
    zero(&mut net, "attn.0.out");
    zero(&mut net, "attn.1.out");
    let a = random_seq("a", 8, 8, 9);
    let mut b = a.clone();
    b.row_mut(3)[2] += 0.5;
    let (ea, eb) = (energies(&net, &a), energies(&net, &b));
    for t in 0..3 {
        assert_eq!(ea[t], eb[t], "position {t} saw the future");
    }
    for t in 3..8 {
        assert_ne!(ea[t], eb[t], "position {t} missed the change");
    }
}

#[test]
fn causal_head_alone_keeps_causality() {
    let mut net = tiny_net(6);
    zero(&mut net, "attn.0.w2");
    zero(&mut net, "attn.1.w2");
    let a = random_seq("a", 8, 8, 10);
    let mut b = a.clone();
    b.row_mut(5)[0] -= 0.7;
    let (ea, eb) = (energies(&net, &a), energies(&net, &b));
    assert_eq!(ea[..5], eb[..5]);
    assert!(ea[5..].iter().zip(&eb[5..]).all(|(x, y)| x != y));
}

#[test]
fn unmasked_head_sees_the_future() {
    let net = tiny_net(6);
    let a = random_seq("a", 8, 8, 10);
    let mut b = a.clone();
    b.row_mut(7)[0] += 0.7;
    assert_ne!(energies(&net, &a)[0], energies(&net, &b)[0]);
}

#[test]
fn identity_blocks_pass_projection_through() {
    let mut net = tiny_net(1);
    for b in 0..6 {
        zero(&mut net, &format!("ssm.{b}.mix"));
    }
    zero(&mut net, "attn.0.out");
    zero(&mut net, "attn.1.out");
    let s = random_seq("a", 1, 8, 2);
    let (xt, segs) = net.stack(&[&s]).unwrap();
    let mut tape = Tape::new();
    let p = net.register(&mut tape, false).unwrap();
    let x = tape.constant(xt.clone()).unwrap();
    let f = net.forward_vars(&mut tape, &p, x, &segs).unwrap();
    let proj = net.param("proj").unwrap();
    let feats = tape.value(f.features).data();
    for j in 0..8 {
        let want: f64 = (0..8).map(|i| xt.data()[i] * proj.data()[i * 8 + j]).sum();
        assert!((feats[j] - want).abs() < 1e-12);
    }
}

#[test]
fn zero_output_weights_give_bias_everywhere() {
    let mut net = tiny_net(2);
    zero(&mut net, "head.w2");
    net.param_mut("head.b2").unwrap().data_mut()[0] = 1.75;
    let e = energies(&net, &random_seq("a", 9, 8, 4));
    assert!(e.iter().all(|v| *v == 1.75));
}

#[test]
fn constant_rows_through_identity_blocks_give_equal_energies() {
    let mut net = tiny_net(2);
    for b in 0..6 {
        zero(&mut net, &format!("ssm.{b}.mix"));
    }
    zero(&mut net, "attn.0.out");
    zero(&mut net, "attn.1.out");
    let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
    let s = EmbeddingSequence::new("c", 5, 8, row.repeat(5)).unwrap();
    let e = energies(&net, &s);
    assert!(e.iter().all(|v| *v == e[0]));
}

#[test]
fn random_default_network_gives_finite_energies() {
    let net = ConstraintNetwork::new(NetworkConfig::default(), 0).unwrap();
    let r = net.forward(&random_seq("a", 16, 768, 1)).unwrap();
    assert_eq!(r.per_position.len(), 16);
    assert!(r.per_position.iter().all(|v| v.is_finite()));
    assert_eq!(aggregate_energy(&r.per_position, r.alpha_used).unwrap(), r.total_energy);
}

#[test]
fn input_guards() {
    let net = tiny_net(0);
    match net.forward(&random_seq("a", 4, 7, 0)) {
        Err(Error::DimMismatch { expected: 8, actual: 7 }) => {}
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        net.forward(&random_seq("a", 65, 8, 0)),
        Err(Error::TooManyPositions { positions: 65, max: 64 })
    ));
}

#[test]
fn not_permutation_invariant() {
    let net = tiny_net(8);
    let a = random_seq("a", 6, 8, 3);
    let mut b = a.clone();
    for t in 0..6 {
        b.row_mut(t).copy_from_slice(a.row(5 - t));
    }
    assert_ne!(
        net.forward(&a).unwrap().total_energy,
        net.forward(&b).unwrap().total_energy
    );
}

#[test]
fn batching_matches_single_inference() {
    let net = tiny_net(4);
    let seqs: Vec<_> = (0..5).map(|i| random_seq("s", 3 + i, 8, i as u64)).collect();
    let refs: Vec<&EmbeddingSequence> = seqs.iter().collect();
    let batch = net.forward_batch(&refs).unwrap();
    for (s, r) in seqs.iter().zip(&batch) {
        let one = net.forward(s).unwrap();
        for (x, y) in one.per_position.iter().zip(&r.per_position) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn same_seed_same_network() {
    let a = ConstraintNetwork::new(NetworkConfig::tiny(8), 11).unwrap();
    let b = ConstraintNetwork::new(NetworkConfig::tiny(8), 11).unwrap();
    let c = ConstraintNetwork::new(NetworkConfig::tiny(8), 12).unwrap();
    assert_eq!(checkpoint::encode(&a), checkpoint::encode(&b));
    assert_ne!(checkpoint::encode(&a), checkpoint::encode(&c));
}

#[test]
fn checkpoint_file_round_trip() {
    let net = tiny_net(7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.ckpt");
    checkpoint::save(&net, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config(), net.config());
    // parameters are stored as f32
    for (a, b) in net.params().iter().zip(back.params()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
    assert_eq!(checkpoint::encode(&back), std::fs::read(&path).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 1;
    assert!(checkpoint::decode(&bytes).is_err());
}

proptest! {
    #[test]
    fn alpha_is_monotone_when_max_positive(
        e in prop::collection::vec(-5.0f64..5.0, 1..20),
        a in 0.0f64..2.0,
        b in 0.0f64..2.0,
    ) {
        prop_assume!(e.iter().copied().fold(f64::NEG_INFINITY, f64::max) > 0.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(aggregate_energy(&e, lo).unwrap() <= aggregate_energy(&e, hi).unwrap());
    }

    #[test]
    fn single_value_aggregates_to_scaled_value(v in -10.0f64..10.0, a in 0.0f64..1.0) {
        let got = aggregate_energy(&[v], a).unwrap();
        prop_assert!((got - v * (1.0 + a)).abs() <= 1e-12 * v.abs().max(1.0));
    }
}

#[test]
fn decay_starts_at_one_half() {
    let net = ConstraintNetwork::new(NetworkConfig::tiny(4), 0).unwrap();
    for a in net.decay(0).unwrap() {
        assert!((a - 0.5).abs() < 1e-12);
    }
}

#[test]
fn pooled_features_are_the_head_hidden_layer_mean() {
    let net = tiny_net(3);
    let s = random_seq("p", 6, 8, 4);
    let inf = net.infer(&[&s]).unwrap().remove(0);
    let (xt, segs) = net.stack(&[&s]).unwrap();
    let mut tape = Tape::new();
    let p = net.register(&mut tape, false).unwrap();
    let x = tape.constant(xt).unwrap();
    let f = net.forward_vars(&mut tape, &p, x, &segs).unwrap();
    let hidden = tape.value(f.hidden);
    assert_eq!(inf.pooled_features.len(), net.config().energy_hidden);
    for (j, got) in inf.pooled_features.iter().enumerate() {
        let want = (0..6).map(|t| hidden.row(t)[j]).sum::<f64>() / 6.0;
        assert!((got - want).abs() < 1e-12);
    }
}
