use std::path::PathBuf;

use ebcn_core::compose::*;
use ebcn_core::corruption::{CorruptionKind, CorruptionSpec};
use ebcn_core::testbed::{generate_corpus, make_pairs};
use ebcn_core::{checkpoint, ConstraintNetwork, EmbeddingSequence, Error, NetworkConfig, TestbedConfig};

const DIM: usize = 12;

fn net(seed: u64) -> ConstraintNetwork {
    let mut n = ConstraintNetwork::new(NetworkConfig::tiny(DIM), seed).unwrap();
    for v in n.param_mut("head.w2").unwrap().data_mut() {
        *v *= 100.0;
    }
    n
}

fn constant_net(b: f64) -> ConstraintNetwork {
    let mut n = net(0);
    n.param_mut("head.w2").unwrap().data_mut().fill(0.0);
    n.param_mut("head.b2").unwrap().data_mut()[0] = b;
    n
}

fn seqs(n: usize) -> Vec<EmbeddingSequence> {
    generate_corpus(&TestbedConfig {
        dim: DIM,
        positions: 6,
        corpus_size: n,
        ..Default::default()
    })
    .unwrap()
}

fn three(gate: bool) -> BranchEnsemble {
    BranchEnsemble {
        structural: Branch::new(net(1), "a"),
        frequency: Some(Branch::new(net(2), "b")),
        local: Some(Branch::new(net(3), "c")),
        beta: DEFAULT_BETA,
        gate,
    }
}

#[test]
fn closed_gate_is_bitwise_structural_plus_local() {
    let ens = three(false);
    for s in seqs(5) {
        let c = ens.compose_energy(Views::shared(&s)).unwrap();
        let es = ens.structural.net.forward(&s).unwrap().total_energy;
        let el = ens.local.as_ref().unwrap().net.forward(&s).unwrap().total_energy;
        assert_eq!(c.combined.to_bits(), (es + DEFAULT_BETA * el).to_bits());
    }
}

#[test]
fn open_gate_adds_frequency_term() {
    let ens = three(true);
    let s = &seqs(1)[0];
    let c = ens.compose_energy(Views::shared(s)).unwrap();
    let f = c.frequency.as_ref().unwrap().total_energy;
    let want = c.structural.total_energy + f + DEFAULT_BETA * c.local.as_ref().unwrap().total_energy;
    assert!((c.combined - want).abs() < 1e-12);
}

#[test]
fn single_branch_is_structural_energy() {
    let ens = BranchEnsemble::single(Branch::new(net(4), "a"));
    let s = &seqs(1)[0];
    let c = ens.compose_energy(Views::shared(s)).unwrap();
    assert_eq!(c.combined, ens.structural.net.forward(s).unwrap().total_energy);
}

#[test]
fn incompatible_branch_is_rejected() {
    let mut ens = three(true);
    ens.local = Some(Branch::new(
        ConstraintNetwork::new(NetworkConfig::tiny(DIM + 4), 0).unwrap(),
        "c",
    ));
    let e = ens.validate().unwrap_err();
    assert!(e.to_string().starts_with("representation incompatibility"), "{e}");

    let ens = three(true);
    let wide = EmbeddingSequence::new("w", 3, DIM + 1, vec![0.5; 3 * (DIM + 1)]).unwrap();
    let s = &seqs(1)[0];
    let views = Views {
        structural: s,
        frequency: Some(&wide),
        local: Some(s),
    };
    assert!(matches!(
        ens.compose_energy(views),
        Err(Error::RepresentationIncompatibility { .. })
    ));
}

#[test]
fn missing_view_for_active_branch_is_rejected() {
    let ens = three(false);
    let s = &seqs(1)[0];
    let views = Views {
        structural: s,
        frequency: None,
        local: Some(s),
    };
    assert!(ens.compose_energy(views).is_err());
}

#[test]
fn composition_is_linear_in_each_branch() {
    let ens = three(true);
    let mut doubled = ens.clone();
    let mut l = (*ens.local.as_ref().unwrap().net).clone();
    for name in ["head.w2", "head.b2"] {
        l.param_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    doubled.local = Some(Branch::new(l, "c"));
    for s in seqs(4) {
        let a = ens.compose_energy(Views::shared(&s)).unwrap();
        let b = doubled.compose_energy(Views::shared(&s)).unwrap();
        assert_eq!(a.structural, b.structural);
        assert_eq!(a.frequency, b.frequency);
        let la = a.local.unwrap().total_energy;
        assert_eq!(b.local.unwrap().total_energy, 2.0 * la);
        assert!((b.combined - a.combined - DEFAULT_BETA * la).abs() < 1e-12);
    }
}

#[test]
fn adding_a_branch_leaves_others_bitwise_unchanged() {
    let mut ens = BranchEnsemble::single(Branch::new(net(1), "a"));
    let s = &seqs(1)[0];
    let before = ens.compose_energy(Views::shared(s)).unwrap();
    ens.local = Some(Branch::new(net(3), "c"));
    let after = ens.compose_energy(Views::shared(s)).unwrap();
    assert_eq!(before.structural, after.structural);
}

#[test]
fn opening_the_gate_never_lowers_energy_when_frequency_is_positive() {
    let mut closed = three(false);
    closed.frequency = Some(Branch::new(constant_net(1.0), "b"));
    let mut open = closed.clone();
    open.gate = true;
    for s in seqs(4) {
        let a = closed.compose_energy(Views::shared(&s)).unwrap().combined;
        let b = open.compose_energy(Views::shared(&s)).unwrap().combined;
        assert!(b >= a);
    }
}

#[test]
fn gate_calibration() {
    let c = seqs(20);
    let pairs = make_pairs(&c, &[CorruptionSpec::new(CorruptionKind::Shuffle, 0)], &c, 1).unwrap();
    let flat = calibrate_gate(&constant_net(0.7), &pairs, 0.0).unwrap();
    assert_eq!(flat.gap, 0.0);
    assert!(!flat.gate);

    let f = net(5);
    let gap = mean_gap(&f, &pairs).unwrap();
    let tau = gap.abs() / 2.0;
    let d = calibrate_gate(&f, &pairs, if gap > 0.0 { tau } else { -3.0 * tau }).unwrap();
    assert!(d.gate);
    assert!(calibrate_gate(&f, &[], 0.0).is_err());

    let s = net(6);
    assert_eq!(default_tau(&s, &pairs).unwrap(), 0.5 * mean_gap(&s, &pairs).unwrap());
}

#[test]
fn contributions() {
    let c = seqs(10);
    let pairs = make_pairs(&c, &[CorruptionSpec::new(CorruptionKind::Shuffle, 0)], &c, 1).unwrap();

    let single = BranchEnsemble::single(Branch::new(net(1), "a"));
    assert_eq!(
        branch_contribution(&single, &pairs).unwrap(),
        vec![(BranchRole::Structural, 1.0)]
    );

    let closed = three(false);
    let shares = branch_contribution(&closed, &pairs).unwrap();
    assert_eq!(shares[1], (BranchRole::Frequency, 0.0));
    assert!((shares.iter().map(|s| s.1).sum::<f64>() - 1.0).abs() < 1e-12);

    let same = BranchEnsemble {
        structural: Branch::new(net(1), "a"),
        frequency: None,
        local: Some(Branch::new(net(1), "a")),
        beta: 1.0,
        gate: false,
    };
    for (_, share) in branch_contribution(&same, &pairs).unwrap() {
        assert!((share - 0.5).abs() < 1e-12);
    }
}

#[test]
fn manifest_file_loads_branches() {
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&net(1), &dir.path().join("s.ckpt")).unwrap();
    checkpoint::save(&net(3), &dir.path().join("l.ckpt")).unwrap();
    let m = EnsembleManifest {
        structural: (PathBuf::from("s.ckpt"), "tokens".into()),
        frequency: None,
        local: Some((PathBuf::from("l.ckpt"), "tokens".into())),
        beta: 0.3,
        gate: false,
        tau: None,
    };
    let text = m.to_kv().to_text();
    let parsed = EnsembleManifest::from_kv(&ebcn_core::KvMap::parse(&text).unwrap(), dir.path()).unwrap();
    let ens = parsed.load().unwrap();
    let s = &seqs(1)[0];
    let direct = three(false).compose_energy(Views::shared(s)).unwrap();
    let loaded = ens.compose_energy(Views::shared(s)).unwrap();
    // checkpoints store f32, so compare loosely
    assert!((direct.structural.total_energy - loaded.structural.total_energy).abs() < 1e-4);
}

#[test]
fn composed_scores_match_combined_energy() {
    let c = seqs(8);
    let pairs = make_pairs(&c, &[CorruptionSpec::new(CorruptionKind::Splice, 0)], &c, 2).unwrap();
    let ens = three(true);
    let scored = score_composed(&ens, &pairs).unwrap();
    assert_eq!(scored.len(), pairs.len());
    for (sp, p) in scored.iter().zip(&pairs) {
        match &sp.scores {
            Some(s) => {
                let want = ens.compose_energy(Views::shared(&p.negative)).unwrap().combined;
                assert_eq!(s.neg.total_energy, want);
            }
            None => assert!(!p.valid),
        }
    }
    // a single-branch ensemble ranks pairs exactly like its network
    let single = BranchEnsemble::single(Branch::new(net(1), "a"));
    let a = ebcn_core::eval::paired_accuracy(&score_composed(&single, &pairs).unwrap(), &[]);
    let b = ebcn_core::eval::paired_accuracy(&ebcn_core::eval::score_pairs(&net(1), &pairs).unwrap(), &[]);
    assert_eq!(a.overall.correct, b.overall.correct);
}
