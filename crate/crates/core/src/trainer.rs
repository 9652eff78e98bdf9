//! Contrastive training of a single branch.
//!
//! Each epoch corrupts every training sequence once with a freshly drawn
//! kind and seed, appends the fixed ingested pairs, shuffles, and runs
//! Adam over mini-batches of the margin loss. Validation pairs are built
//! once and reused so epochs are comparable.

use std::time::Instant;

use ebcn_diff::{DiffError, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::corruption::{corrupt, ContrastivePair, CorruptionSpec};
use crate::error::{Error, Result};
use crate::eval::{paired_accuracy, score_pairs};
use crate::kv::KvMap;
use crate::network::ConstraintNetwork;
use crate::sequence::EmbeddingSequence;
use crate::testbed::{make_pairs, pair_seed};

/// `E_pos² + max(0, m − E_neg)²`
pub fn contrastive_loss(e_pos: f64, e_neg: f64, margin: f64) -> f64 {
    let h = (margin - e_neg).max(0.0);
    e_pos * e_pos + h * h
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Loss weight of corruption-generated pairs.
    pub mix_corruption: f64,
    /// Loss weight of ingested pairs.
    pub mix_ingested: f64,
    /// Checkpoint every this many epochs (the final epoch always saves).
    pub checkpoint_every: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 5.0,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 2,
            clip_norm: 1.0,
            seed: 0,
            mix_corruption: 1.0,
            mix_ingested: 1.0,
            checkpoint_every: 1,
            val_fraction: 0.1,
        }
    }
}

const KEYS: &[&str] = &[
    "margin",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "epochs",
    "clip_norm",
    "seed",
    "mix_corruption",
    "mix_ingested",
    "checkpoint_every",
    "val_fraction",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and >= 0"));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(k, "must lie in [0, 1)"));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        if !(self.mix_corruption >= 0.0 && self.mix_ingested >= 0.0) || self.mix_corruption + self.mix_ingested == 0.0 {
            return Err(Error::config("mix", "weights must be >= 0 and not both zero"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("margin", self.margin);
        m.set("lr", self.lr);
        m.set("beta1", self.beta1);
        m.set("beta2", self.beta2);
        m.set("adam_eps", self.adam_eps);
        m.set("batch_size", self.batch_size);
        m.set("epochs", self.epochs);
        m.set("clip_norm", self.clip_norm);
        m.set("seed", self.seed);
        m.set("mix_corruption", self.mix_corruption);
        m.set("mix_ingested", self.mix_ingested);
        m.set("checkpoint_every", self.checkpoint_every);
        m.set("val_fraction", self.val_fraction);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        m.check_known(KEYS)?;
        let d = Self::default();
        let cfg = TrainConfig {
            margin: m.get_or("margin", d.margin)?,
            lr: m.get_or("lr", d.lr)?,
            beta1: m.get_or("beta1", d.beta1)?,
            beta2: m.get_or("beta2", d.beta2)?,
            adam_eps: m.get_or("adam_eps", d.adam_eps)?,
            batch_size: m.get_or("batch_size", d.batch_size)?,
            epochs: m.get_or("epochs", d.epochs)?,
            clip_norm: m.get_or("clip_norm", d.clip_norm)?,
            seed: m.get_or("seed", d.seed)?,
            mix_corruption: m.get_or("mix_corruption", d.mix_corruption)?,
            mix_ingested: m.get_or("mix_ingested", d.mix_ingested)?,
            checkpoint_every: m.get_or("checkpoint_every", d.checkpoint_every)?,
            val_fraction: m.get_or("val_fraction", d.val_fraction)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss; absent for the epoch-0 baseline.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_auc: Option<f64>,
    pub skipped_batches: usize,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record serializes") + "\n")
            .collect()
    }

    /// The log with wall times zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Where training pairs come from.
#[derive(Clone, Copy, Debug, Default)]
pub struct DataSources<'a> {
    /// Coherent sequences to corrupt on the fly.
    pub corpus: &'a [EmbeddingSequence],
    /// Corruption templates; kind and parameters are kept, seeds are redrawn.
    pub specs: &'a [CorruptionSpec],
    /// Externally produced pairs, used as-is.
    pub paired: Option<&'a [ContrastivePair]>,
}

pub struct TrainOutcome {
    pub network: ConstraintNetwork,
    pub log: TrainLog,
    /// Fixed validation pairs, for downstream analysis.
    pub validation: Vec<ContrastivePair>,
    /// Sequences held out for validation.
    pub validation_sequences: Vec<EmbeddingSequence>,
}

/// Hash identifying a (network, training) configuration pair.
pub fn config_hash(net: &NetworkConfig, cfg: &TrainConfig) -> String {
    let mut m = KvMap::new();
    for (k, v) in net.to_kv().iter() {
        m.set(format!("net.{k}"), v);
    }
    for (k, v) in cfg.to_kv().iter() {
        m.set(format!("train.{k}"), v);
    }
    m.hash_hex()
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(net: &ConstraintNetwork) -> Self {
        let zeros = || net.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut ConstraintNetwork, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Mean margin loss over the valid pairs in one differentiable pass;
/// returns the loss value and per-parameter gradients.
pub fn batch_loss_and_grads(
    net: &ConstraintNetwork,
    pairs: &[(&ContrastivePair, f64)],
    margin: f64,
    tape: &mut Tape,
) -> Result<(f64, Vec<Tensor>)> {
    tape.reset();
    let n = pairs.len();
    let seqs: Vec<&EmbeddingSequence> = pairs
        .iter()
        .map(|(p, _)| &p.positive)
        .chain(pairs.iter().map(|(p, _)| &p.negative))
        .collect();
    let (x, segs) = net.stack(&seqs)?;
    let params = net.register(tape, true)?;
    let x = tape.constant(x)?;
    let f = net.forward_vars(tape, &params, x, &segs)?;
    let e_pos = tape.slice_rows(f.totals, 0, n)?;
    let e_neg = tape.slice_rows(f.totals, n, n)?;
    let pos_term = tape.square(e_pos)?;
    let neg = tape.scale(e_neg, -1.0)?;
    let gap = tape.add_scalar(neg, margin)?;
    let hinge = tape.relu(gap)?;
    let neg_term = tape.square(hinge)?;
    let per_pair = tape.add(pos_term, neg_term)?;
    let wsum: f64 = pairs.iter().map(|(_, w)| w).sum();
    let weights = tape.constant(Tensor::matrix(n, 1, pairs.iter().map(|(_, w)| w / wsum).collect())?)?;
    let weighted = tape.mul(per_pair, weights)?;
    let loss = tape.sum_all(weighted)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let out = params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((value, out))
}

/// Validation loss, accuracy and AUC of `net` on fixed pairs.
fn validate(
    net: &ConstraintNetwork,
    pairs: &[ContrastivePair],
    margin: f64,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    if pairs.is_empty() {
        return Ok((None, None, None));
    }
    let scored = score_pairs(net, pairs)?;
    let losses: Vec<f64> = scored
        .iter()
        .filter_map(|p| p.scores.as_ref())
        .map(|s| contrastive_loss(s.pos.total_energy, s.neg.total_energy, margin))
        .collect();
    let loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
    let report = paired_accuracy(&scored, &[]);
    Ok((loss, report.overall.accuracy, report.auc))
}

enum Item {
    Corrupt { seq: usize, spec: usize, seed: u64 },
    Ingested(usize),
}

fn split_indices(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * fraction).round() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Trains one branch from scratch. `on_checkpoint(epoch, net)` runs every
/// `checkpoint_every` epochs and after the last one.
pub fn train_branch(
    net_cfg: &NetworkConfig,
    sources: DataSources<'_>,
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &ConstraintNetwork) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let use_corrupt = !sources.corpus.is_empty() && cfg.mix_corruption > 0.0;
    let ingested = sources.paired.unwrap_or(&[]);
    let use_ingested = !ingested.is_empty() && cfg.mix_ingested > 0.0;
    if !use_corrupt && !use_ingested {
        return Err(Error::config("data", "no training data source with nonzero weight"));
    }
    if use_corrupt && sources.specs.is_empty() {
        return Err(Error::config("kinds", "corpus given without corruption kinds"));
    }
    let dims: Vec<usize> = sources
        .corpus
        .iter()
        .map(|s| s.dim())
        .chain(ingested.iter().map(|p| p.positive.dim()))
        .collect();
    if let Some(&d) = dims.iter().find(|&&d| d != net_cfg.input_dim) {
        return Err(Error::DimMismatch {
            expected: net_cfg.input_dim,
            actual: d,
        });
    }

    let hash = config_hash(net_cfg, cfg);
    let start = Instant::now();
    let mut net = ConstraintNetwork::new(net_cfg.clone(), cfg.seed)?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(1);
    let (train_seq, val_seq) = if use_corrupt {
        split_indices(sources.corpus.len(), cfg.val_fraction, &mut split_rng)
    } else {
        (Vec::new(), Vec::new())
    };
    let (train_ing, val_ing) = if use_ingested {
        split_indices(ingested.len(), cfg.val_fraction, &mut split_rng)
    } else {
        (Vec::new(), Vec::new())
    };
    let train_pool: Vec<EmbeddingSequence> = train_seq.iter().map(|&i| sources.corpus[i].clone()).collect();
    let val_pool: Vec<EmbeddingSequence> = val_seq.iter().map(|&i| sources.corpus[i].clone()).collect();
    let mut validation = if use_corrupt {
        make_pairs(&val_pool, sources.specs, &val_pool, pair_seed(cfg.seed, u64::MAX))?
    } else {
        Vec::new()
    };
    validation.extend(val_ing.iter().map(|&i| ingested[i].clone()));

    let mut log = TrainLog::default();
    let record = |epoch, train_loss, skipped, net: &ConstraintNetwork| -> Result<EpochRecord> {
        let (val_loss, val_accuracy, val_auc) = validate(net, &validation, cfg.margin)?;
        Ok(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            val_auc,
            skipped_batches: skipped,
            wall_time_s: start.elapsed().as_secs_f64(),
            seed: cfg.seed,
            config_hash: hash.clone(),
        })
    };
    log.records.push(record(0, None, 0, &net)?);
    log::info!("epoch 0 (baseline): {:?}", log.records[0]);

    let mut adam = Adam::new(&net);
    let mut tape = Tape::new();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(100 + epoch as u64);
        let mut items: Vec<Item> = Vec::new();
        if use_corrupt {
            for i in 0..train_pool.len() {
                let spec = rng.random_range(0..sources.specs.len());
                items.push(Item::Corrupt {
                    seq: i,
                    spec,
                    seed: rng.random(),
                });
            }
        }
        if use_ingested {
            items.extend(train_ing.iter().map(|&i| Item::Ingested(i)));
        }
        items.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        let mut skipped = 0usize;
        for (b, chunk) in items.chunks(cfg.batch_size).enumerate() {
            let mut owned: Vec<ContrastivePair> = Vec::new();
            let mut weights: Vec<(Option<usize>, f64)> = Vec::new();
            for item in chunk {
                match *item {
                    Item::Corrupt { seq, spec, seed } => {
                        let s = sources.specs[spec].with_seed(seed);
                        let p = corrupt(&train_pool[seq], &s, &train_pool)?;
                        if p.valid {
                            owned.push(p);
                            weights.push((None, cfg.mix_corruption));
                        }
                    }
                    Item::Ingested(i) => {
                        if ingested[i].valid {
                            weights.push((Some(i), cfg.mix_ingested));
                        }
                    }
                }
            }
            if weights.is_empty() {
                log::warn!("epoch {epoch} batch {b}: no valid pairs, skipped");
                skipped += 1;
                continue;
            }
            let mut owned_iter = owned.iter();
            let batch: Vec<(&ContrastivePair, f64)> = weights
                .iter()
                .map(|&(src, w)| match src {
                    Some(i) => (&ingested[i], w),
                    None => (owned_iter.next().expect("one owned pair per slot"), w),
                })
                .collect();
            let (loss, mut grads) = match batch_loss_and_grads(&net, &batch, cfg.margin, &mut tape) {
                Ok(v) => v,
                Err(Error::Diff(DiffError::NonFinite { .. })) => return Err(Error::NonFiniteLoss { epoch, batch: b }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut net, &grads, cfg);
            loss_sum += loss;
            loss_batches += 1;
        }
        let train_loss = (loss_batches > 0).then(|| loss_sum / loss_batches as f64);
        let rec = record(epoch, train_loss, skipped, &net)?;
        log::info!(
            "epoch {epoch}: train_loss {:?} val_acc {:?} val_auc {:?} ({:.1}s)",
            rec.train_loss,
            rec.val_accuracy,
            rec.val_auc,
            rec.wall_time_s
        );
        log.records.push(rec);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            on_checkpoint(epoch, &net)?;
        }
    }
    if cfg.epochs == 0 {
        on_checkpoint(0, &net)?;
    }
    Ok(TrainOutcome {
        network: net,
        log,
        validation,
        validation_sequences: val_pool,
    })
}
