//! Shared finite-difference suite over every differentiable op.

use ebcn_diff::{grad_check, GradCheckReport, Result, Segments, Tape, Tensor, Var, MASK_NEG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks (relu, max) are not straddled by
/// the finite-difference step.
pub fn rand_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an arbitrary tensor to a scalar with fixed random weights so
/// every output coordinate contributes a distinct gradient.
pub fn contract(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let w = t.constant(rand_tensor(&mut rng, &shape))?;
    let p = t.mul(y, w)?;
    t.sum_all(p)
}

/// Finite-difference check of every op (and every differentiable operand)
/// at one seed.
pub fn op_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
        out.push((name, grad_check(f, x, EPS, TOL).unwrap()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let bt = rand_tensor(&mut rng, &[5, 4]);
    let same = rand_tensor(&mut rng, &[3, 4]);
    let bias = rand_tensor(&mut rng, &[4]);
    let gamma = rand_tensor(&mut rng, &[4]);
    let kernel = rand_tensor(&mut rng, &[4, 3]);
    let decay = Tensor::vector((0..4).map(|_| rng.random_range(0.1..0.95)).collect());
    let segs = Segments::new(vec![2, 3]).unwrap();
    let x5 = rand_tensor(&mut rng, &[5, 4]);
    let kinked = rand_off_kink(&mut rng, &[3, 4]);

    // binary ops: check both operands
    check("matmul/a", &a, &|t, x| {
        let w = t.constant(b.clone())?;
        let y = t.matmul(x, w)?;
        contract(t, y, seed)
    });
    check("matmul/b", &b, &|t, x| {
        let w = t.constant(a.clone())?;
        let y = t.matmul(w, x)?;
        contract(t, y, seed)
    });
    check("matmul_nt/a", &a, &|t, x| {
        let w = t.constant(bt.clone())?;
        let y = t.matmul_nt(x, w)?;
        contract(t, y, seed)
    });
    check("matmul_nt/b", &bt, &|t, x| {
        let w = t.constant(a.clone())?;
        let y = t.matmul_nt(w, x)?;
        contract(t, y, seed)
    });
    check("matmul_nt/self", &a, &|t, x| {
        let y = t.matmul_nt(x, x)?;
        contract(t, y, seed)
    });
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        check(name, &a, &|t, x| {
            let w = t.constant(same.clone())?;
            let y = match which {
                0 => t.add(w, x)?,
                1 => t.sub(w, x)?,
                _ => t.mul(w, x)?,
            };
            contract(t, y, seed)
        });
    }
    check("add_bias/x", &a, &|t, x| {
        let bb = t.constant(bias.clone())?;
        let y = t.add_bias(x, bb)?;
        contract(t, y, seed)
    });
    check("add_bias/bias", &bias, &|t, x| {
        let m = t.constant(a.clone())?;
        let y = t.add_bias(m, x)?;
        contract(t, y, seed)
    });
    check("scale", &a, &|t, x| {
        let y = t.scale(x, -2.5)?;
        contract(t, y, seed)
    });
    check("add_scalar", &a, &|t, x| {
        let y = t.add_scalar(x, 0.7)?;
        contract(t, y, seed)
    });
    check("square", &a, &|t, x| {
        let y = t.square(x)?;
        contract(t, y, seed)
    });
    check("sigmoid", &a, &|t, x| {
        let y = t.sigmoid(x)?;
        contract(t, y, seed)
    });
    check("silu", &a, &|t, x| {
        let y = t.silu(x)?;
        contract(t, y, seed)
    });
    check("exp", &a, &|t, x| {
        let y = t.exp(x)?;
        contract(t, y, seed)
    });
    check("softplus", &a, &|t, x| {
        let y = t.softplus(x)?;
        contract(t, y, seed)
    });
    check("relu", &kinked, &|t, x| {
        let y = t.relu(x)?;
        contract(t, y, seed)
    });
    check("softmax", &a, &|t, x| {
        let y = t.softmax(x, None)?;
        contract(t, y, seed)
    });
    let mut mask = Tensor::zeros(&[3, 4]);
    for r in 0..3 {
        for c in r + 1..4 {
            mask.data_mut()[r * 4 + c] = MASK_NEG;
        }
    }
    check("softmax/masked", &a, &|t, x| {
        let y = t.softmax(x, Some(&mask))?;
        contract(t, y, seed)
    });
    check("layer_norm/x", &a, &|t, x| {
        let g = t.constant(gamma.clone())?;
        let bb = t.constant(bias.clone())?;
        let y = t.layer_norm(x, g, bb)?;
        contract(t, y, seed)
    });
    check("layer_norm/gamma", &gamma, &|t, x| {
        let m = t.constant(a.clone())?;
        let bb = t.constant(bias.clone())?;
        let y = t.layer_norm(m, x, bb)?;
        contract(t, y, seed)
    });
    check("layer_norm/beta", &bias, &|t, x| {
        let m = t.constant(a.clone())?;
        let g = t.constant(gamma.clone())?;
        let y = t.layer_norm(m, g, x)?;
        contract(t, y, seed)
    });
    check("causal_conv/x", &x5, &|t, x| {
        let k = t.constant(kernel.clone())?;
        let y = t.causal_conv(x, k, &segs)?;
        contract(t, y, seed)
    });
    check("causal_conv/kernel", &kernel, &|t, x| {
        let m = t.constant(x5.clone())?;
        let y = t.causal_conv(m, x, &segs)?;
        contract(t, y, seed)
    });
    check("decay_scan/u", &x5, &|t, x| {
        let dv = t.constant(decay.clone())?;
        let y = t.decay_scan(x, dv, &segs)?;
        contract(t, y, seed)
    });
    check("decay_scan/decay", &decay, &|t, x| {
        let u = t.constant(x5.clone())?;
        let y = t.decay_scan(u, x, &segs)?;
        contract(t, y, seed)
    });
    check("mean_rows", &x5, &|t, x| {
        let y = t.mean_rows(x, &segs)?;
        contract(t, y, seed)
    });
    check("max_rows", &x5, &|t, x| {
        let y = t.max_rows(x, &segs)?;
        contract(t, y, seed)
    });
    check("mean_cols", &a, &|t, x| {
        let y = t.mean_cols(x)?;
        contract(t, y, seed)
    });
    check("max_cols", &a, &|t, x| {
        let y = t.max_cols(x)?;
        contract(t, y, seed)
    });
    check("concat_cols", &a, &|t, x| {
        let w = t.constant(same.clone())?;
        let y = t.concat_cols(&[w, x, x])?;
        contract(t, y, seed)
    });
    check("concat_rows", &a, &|t, x| {
        let w = t.constant(same.clone())?;
        let y = t.concat_rows(&[x, w, x])?;
        contract(t, y, seed)
    });
    check("slice_rows", &x5, &|t, x| {
        let y = t.slice_rows(x, 1, 3)?;
        contract(t, y, seed)
    });
    out
}
