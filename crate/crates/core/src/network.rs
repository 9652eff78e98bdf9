//! The constraint network: input projection, gated SSM blocks with
//! interleaved dual-head attention, and a per-position energy head.

use ebcn_diff::{Segments, Tape, Tensor, Var, MASK_NEG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::sequence::EmbeddingSequence;

/// Scalar energy plus its per-position decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub total_energy: f64,
    pub per_position: Vec<f64>,
    pub alpha_used: f64,
}

impl EnergyReport {
    pub fn from_per_position(per_position: Vec<f64>, alpha: f64) -> Result<Self> {
        let total_energy = aggregate_energy(&per_position, alpha)?;
        Ok(EnergyReport {
            total_energy,
            per_position,
            alpha_used: alpha,
        })
    }
}

/// `mean(e) + alpha * max(e)`.
pub fn aggregate_energy(e: &[f64], alpha: f64) -> Result<f64> {
    if e.is_empty() {
        return Err(Error::data("cannot aggregate an empty energy vector"));
    }
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(mean + alpha * max)
}

/// Decay parameter giving `exp(-softplus(λ)) = 0.5` at initialization.
/// Starting at 0.9 smears every position over ~10 predecessors and the
/// default-width network then barely moves off chance in two epochs.
pub const DECAY_INIT_LAMBDA: f64 = 0.0;

/// Scale applied to the fan-in init of the last energy layer. Small enough
/// that initial energies sit near the bias, large enough that two different
/// inputs rarely tie.
pub const ENERGY_OUT_INIT_SCALE: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintNetwork {
    config: NetworkConfig,
    params: Vec<Param>,
}

/// Tape handles produced by one batched forward pass.
pub struct ForwardVars {
    /// `[rows, 1]` per-position energies.
    pub energies: Var,
    /// `[rows, model_dim]` representation entering the energy head.
    pub features: Var,
    /// `[rows, energy_hidden]` penultimate layer: the energy head's SiLU output.
    pub hidden: Var,
    /// `[sequences, 1]` aggregated energies.
    pub totals: Var,
}

/// Per-sequence output of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub report: EnergyReport,
    /// Position-mean of the penultimate (energy-head hidden) layer.
    pub pooled_features: Vec<f64>,
}

const SSM_PARAMS: usize = 5;
const ATTN_PARAMS: usize = 3;
const INFER_CHUNK: usize = 32;

fn param_shapes(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let h = cfg.energy_hidden;
    let mut out = vec![("proj".to_string(), vec![cfg.input_dim, d])];
    for b in 0..cfg.ssm_blocks {
        out.push((format!("ssm.{b}.conv"), vec![d, cfg.conv_width]));
        out.push((format!("ssm.{b}.gate_w"), vec![d, d]));
        out.push((format!("ssm.{b}.gate_b"), vec![d]));
        out.push((format!("ssm.{b}.lambda"), vec![d]));
        out.push((format!("ssm.{b}.mix"), vec![d, d]));
    }
    for a in 0..cfg.attention_after.len() {
        out.push((format!("attn.{a}.w1"), vec![d, d / 2]));
        out.push((format!("attn.{a}.w2"), vec![d, d / 2]));
        out.push((format!("attn.{a}.out"), vec![d, d]));
    }
    out.push(("head.ln_gamma".to_string(), vec![d]));
    out.push(("head.ln_beta".to_string(), vec![d]));
    out.push(("head.w1".to_string(), vec![d, h]));
    out.push(("head.b1".to_string(), vec![h]));
    out.push(("head.w2".to_string(), vec![h, 1]));
    out.push(("head.b2".to_string(), vec![1]));
    out
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

impl ConstraintNetwork {
    /// Seeded initialization: uniform fan-in weights, zero biases, unit
    /// layer-norm scale, decay at 0.5.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let leaf = name.rsplit('.').next().unwrap_or("");
                let value = match leaf {
                    "gate_b" | "b1" | "b2" | "ln_beta" => Tensor::zeros(&shape),
                    "ln_gamma" => Tensor::full(&shape, 1.0),
                    "lambda" => Tensor::full(&shape, DECAY_INIT_LAMBDA),
                    // depthwise: each channel sees `width` taps
                    "conv" => uniform(&mut rng, &shape, 1.0 / (shape[1] as f64).sqrt()),
                    _ => {
                        let mut bound = 1.0 / (shape[0] as f64).sqrt();
                        if name == "head.w2" {
                            bound *= ENERGY_OUT_INIT_SCALE;
                        }
                        uniform(&mut rng, &shape, bound)
                    }
                };
                Param { name, value }
            })
            .collect();
        Ok(ConstraintNetwork { config, params })
    }

    /// Assembles a network from named tensors, checking names and shapes
    /// against the config.
    pub fn from_params(config: NetworkConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let want = param_shapes(&config);
        if want.len() != params.len() {
            return Err(Error::data(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in want.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::data(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(ConstraintNetwork { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Per-channel decay `exp(-softplus(λ))` of SSM block `b`.
    pub fn decay(&self, b: usize) -> Option<Vec<f64>> {
        let lam = self.param(&format!("ssm.{b}.lambda"))?;
        Some(lam.data().iter().map(|&l| (-softplus(l)).exp()).collect())
    }

    pub fn check_input(&self, seq: &EmbeddingSequence) -> Result<()> {
        if seq.dim() != self.config.input_dim {
            return Err(Error::DimMismatch {
                expected: self.config.input_dim,
                actual: seq.dim(),
            });
        }
        if seq.positions() > self.config.max_positions {
            return Err(Error::TooManyPositions {
                positions: seq.positions(),
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Registers every parameter on `tape`, in manifest order.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| Ok(tape.leaf(p.value.clone(), requires_grad)?))
            .collect()
    }

    /// Stacks `seqs` row-wise into one `[rows, input_dim]` tensor.
    pub fn stack(&self, seqs: &[&EmbeddingSequence]) -> Result<(Tensor, Segments)> {
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_input(s)?;
            data.extend_from_slice(s.data());
            lens.push(s.positions());
        }
        let rows = lens.iter().sum();
        let segs = Segments::new(lens)?;
        Ok((Tensor::matrix(rows, self.config.input_dim, data)?, segs))
    }

    /// Builds the full forward graph on `tape` with parameter handles `p`
    /// (as returned by [`register`](Self::register)) over stacked input `x`.
    pub fn forward_vars(&self, tape: &mut Tape, p: &[Var], x: Var, segs: &Segments) -> Result<ForwardVars> {
        let cfg = &self.config;
        let nb = cfg.ssm_blocks;
        let mut h = tape.matmul(x, p[0])?;
        let mut attn = 0;
        for b in 0..nb {
            let base = 1 + SSM_PARAMS * b;
            h = ssm_block(tape, h, &p[base..base + SSM_PARAMS], segs)?;
            if cfg.attention_after.contains(&(b + 1)) {
                let base = 1 + SSM_PARAMS * nb + ATTN_PARAMS * attn;
                h = attention_block(tape, h, &p[base..base + ATTN_PARAMS], cfg.model_dim, segs)?;
                attn += 1;
            }
        }
        let head = &p[1 + SSM_PARAMS * nb + ATTN_PARAMS * cfg.attention_after.len()..];
        let (hidden, energies) = energy_head(tape, h, head)?;
        let mean = tape.mean_rows(energies, segs)?;
        let max = tape.max_rows(energies, segs)?;
        let scaled = tape.scale(max, cfg.alpha)?;
        let totals = tape.add(mean, scaled)?;
        Ok(ForwardVars {
            energies,
            features: h,
            hidden,
            totals,
        })
    }

    /// Inference over many sequences, batched internally.
    pub fn infer(&self, seqs: &[&EmbeddingSequence]) -> Result<Vec<Inference>> {
        let mut out = Vec::with_capacity(seqs.len());
        let mut tape = Tape::new();
        for chunk in seqs.chunks(INFER_CHUNK) {
            tape.reset();
            let (xt, segs) = self.stack(chunk)?;
            let p = self.register(&mut tape, false)?;
            let x = tape.constant(xt)?;
            let f = self.forward_vars(&mut tape, &p, x, &segs)?;
            let e = tape.value(f.energies).data();
            let feats = tape.value(f.hidden);
            let d = self.config.energy_hidden;
            for (start, len) in segs.spans() {
                let report = EnergyReport::from_per_position(e[start..start + len].to_vec(), self.config.alpha)?;
                let mut pooled = vec![0.0; d];
                for t in start..start + len {
                    for (acc, v) in pooled.iter_mut().zip(feats.row(t)) {
                        *acc += v;
                    }
                }
                pooled.iter_mut().for_each(|v| *v /= len as f64);
                out.push(Inference {
                    report,
                    pooled_features: pooled,
                });
            }
        }
        Ok(out)
    }

    pub fn forward(&self, seq: &EmbeddingSequence) -> Result<EnergyReport> {
        Ok(self.infer(&[seq])?.remove(0).report)
    }

    pub fn forward_batch(&self, seqs: &[&EmbeddingSequence]) -> Result<Vec<EnergyReport>> {
        Ok(self.infer(seqs)?.into_iter().map(|i| i.report).collect())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `x + W_mix (sigmoid(W_g x + b_g) ⊙ scan(conv(x)))`
fn ssm_block(tape: &mut Tape, x: Var, p: &[Var], segs: &Segments) -> Result<Var> {
    let [conv, gate_w, gate_b, lambda, mix] = [p[0], p[1], p[2], p[3], p[4]];
    let u = tape.causal_conv(x, conv, segs)?;
    let sp = tape.softplus(lambda)?;
    let neg = tape.scale(sp, -1.0)?;
    let a = tape.exp(neg)?;
    let s = tape.decay_scan(u, a, segs)?;
    let gl = tape.matmul(x, gate_w)?;
    let gl = tape.add_bias(gl, gate_b)?;
    let g = tape.sigmoid(gl)?;
    let gs = tape.mul(g, s)?;
    let m = tape.matmul(gs, mix)?;
    Ok(tape.add(x, m)?)
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = MASK_NEG;
        }
    }
    m
}

/// Two heads sharing one projection each for scores and values; head 1 is
/// causal, head 2 sees the whole sequence.
fn attention_block(tape: &mut Tape, x: Var, p: &[Var], d: usize, segs: &Segments) -> Result<Var> {
    let [w1, w2, w_out] = [p[0], p[1], p[2]];
    let inv = 1.0 / ((d / 2) as f64).sqrt();
    let h1 = tape.matmul(x, w1)?;
    let h2 = tape.matmul(x, w2)?;
    let mut outs1 = Vec::with_capacity(segs.count());
    let mut outs2 = Vec::with_capacity(segs.count());
    for (start, len) in segs.spans() {
        let mask = causal_mask(len);
        for (h, causal, outs) in [(h1, true, &mut outs1), (h2, false, &mut outs2)] {
            let hs = if segs.count() == 1 {
                h
            } else {
                tape.slice_rows(h, start, len)?
            };
            let sc = tape.matmul_nt(hs, hs)?;
            let sc = tape.scale(sc, inv)?;
            let w = tape.softmax(sc, causal.then_some(&mask))?;
            outs.push(tape.matmul(w, hs)?);
        }
    }
    let o1 = if outs1.len() == 1 {
        outs1[0]
    } else {
        tape.concat_rows(&outs1)?
    };
    let o2 = if outs2.len() == 1 {
        outs2[0]
    } else {
        tape.concat_rows(&outs2)?
    };
    let cat = tape.concat_cols(&[o1, o2])?;
    let mixed = tape.matmul(cat, w_out)?;
    Ok(tape.add(x, mixed)?)
}

fn energy_head(tape: &mut Tape, x: Var, p: &[Var]) -> Result<(Var, Var)> {
    let [gamma, beta, w1, b1, w2, b2] = [p[0], p[1], p[2], p[3], p[4], p[5]];
    let ln = tape.layer_norm(x, gamma, beta)?;
    let z = tape.matmul(ln, w1)?;
    let z = tape.add_bias(z, b1)?;
    let z = tape.silu(z)?;
    let e = tape.matmul(z, w2)?;
    Ok((z, tape.add_bias(e, b2)?))
}
