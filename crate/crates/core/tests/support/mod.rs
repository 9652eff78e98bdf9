//! Helpers shared by the network tests and the acceptance run.

use ebcn_core::{ConstraintNetwork, EmbeddingSequence, Error, NetworkConfig};
use ebcn_diff::{grad_check, GradCheckReport, Segments, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_seq(id: &str, positions: usize, dim: usize, seed: u64) -> EmbeddingSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..positions * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingSequence::new(id, positions, dim, data).unwrap()
}

/// Tiny network with the energy output layer at full fan-in scale, so
/// gradients reaching early layers are not dwarfed by the small init.
pub fn tiny_net(seed: u64) -> ConstraintNetwork {
    let mut net = ConstraintNetwork::new(NetworkConfig::tiny(8), seed).unwrap();
    for v in net.param_mut("head.w2").unwrap().data_mut() {
        *v *= 100.0;
    }
    net
}

/// Scalar objective touching totals and per-position energies of a
/// two-sequence batch.
pub fn objective(
    net: &ConstraintNetwork,
    tape: &mut Tape,
    p: &[Var],
    x: Var,
    segs: &Segments,
) -> ebcn_diff::Result<Var> {
    let f = net.forward_vars(tape, p, x, segs).map_err(|e| match e {
        Error::Diff(d) => d,
        other => panic!("{other}"),
    })?;
    let t = tape.sum_all(f.totals)?;
    let sq = tape.square(f.energies)?;
    let s = tape.sum_all(sq)?;
    let s = tape.scale(s, 0.1)?;
    tape.add(t, s)
}

/// Finite-difference check of a tiny two-sequence batch with respect to
/// the input and to every parameter.
pub fn network_grad_check(seed: u64) -> Vec<(String, GradCheckReport)> {
    let net = tiny_net(seed);
    let a = random_seq("a", 6, 8, 100 + seed);
    let b = random_seq("b", 4, 8, 200 + seed);
    let (xt, segs) = net.stack(&[&a, &b]).unwrap();
    let mut out = Vec::new();
    let r = grad_check(
        |tape, x| {
            let p = net.register(tape, false).unwrap();
            objective(&net, tape, &p, x, &segs)
        },
        &xt,
        1e-6,
        1e-4,
    )
    .unwrap();
    out.push(("input".to_string(), r));
    for (k, param) in net.params().iter().enumerate() {
        let r = grad_check(
            |tape, v| {
                let mut p = net.register(tape, false).unwrap();
                p[k] = v;
                let x = tape.constant(xt.clone())?;
                objective(&net, tape, &p, x, &segs)
            },
            &param.value,
            1e-6,
            1e-4,
        )
        .unwrap();
        out.push((param.name.clone(), r));
    }
    out
}
