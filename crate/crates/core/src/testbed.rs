//! Synthetic coherent sequences with known structure: each sequence is a
//! few contiguous topic segments, and within a segment rows follow an AR(1)
//! walk around that topic's anchor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corruption::{corrupt, ContrastivePair, CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::kv::KvMap;
use crate::sequence::{cosine, EmbeddingSequence};

pub const MAX_TESTBED_POSITIONS: usize = 32;

/// Minimum AUC the discontinuity baseline must reach for a testbed
/// configuration to count as a solvable task.
pub const LEARNABILITY_FLOOR: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct TestbedConfig {
    pub dim: usize,
    pub positions: usize,
    pub n_topics: usize,
    pub rho: f64,
    pub sigma: f64,
    pub anchor_scale: f64,
    pub corpus_size: usize,
    pub seed: u64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            dim: 768,
            positions: 24,
            n_topics: 2,
            rho: 0.9,
            sigma: 1.0,
            anchor_scale: 0.5,
            corpus_size: 5000,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "dim",
    "positions",
    "n_topics",
    "rho",
    "sigma",
    "anchor_scale",
    "corpus_size",
    "seed",
];

impl TestbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.positions == 0 || self.positions > MAX_TESTBED_POSITIONS {
            return Err(Error::config(
                "positions",
                format!("must lie in [1, {MAX_TESTBED_POSITIONS}]"),
            ));
        }
        if self.n_topics == 0 || self.n_topics > self.positions {
            return Err(Error::config("n_topics", "must lie in [1, positions]"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho", "must lie in (0, 1)"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be positive"));
        }
        if !(self.anchor_scale >= 0.0 && self.anchor_scale.is_finite()) {
            return Err(Error::config("anchor_scale", "must be >= 0"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("dim", self.dim);
        m.set("positions", self.positions);
        m.set("n_topics", self.n_topics);
        m.set("rho", self.rho);
        m.set("sigma", self.sigma);
        m.set("anchor_scale", self.anchor_scale);
        m.set("corpus_size", self.corpus_size);
        m.set("seed", self.seed);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        m.check_known(KEYS)?;
        let d = Self::default();
        let cfg = TestbedConfig {
            dim: m.get_or("dim", d.dim)?,
            positions: m.get_or("positions", d.positions)?,
            n_topics: m.get_or("n_topics", d.n_topics)?,
            rho: m.get_or("rho", d.rho)?,
            sigma: m.get_or("sigma", d.sigma)?,
            anchor_scale: m.get_or("anchor_scale", d.anchor_scale)?,
            corpus_size: m.get_or("corpus_size", d.corpus_size)?,
            seed: m.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Segment boundaries: `n_topics` contiguous, near-equal segments.
pub fn segment_starts(positions: usize, n_topics: usize) -> Vec<usize> {
    (0..n_topics).map(|k| k * positions / n_topics).collect()
}

/// Sequence `index` of the corpus; independent of every other index.
pub fn generate_sequence(cfg: &TestbedConfig, index: usize) -> EmbeddingSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (p, d) = (cfg.positions, cfg.dim);
    let innov = cfg.sigma * (1.0 - cfg.rho * cfg.rho).sqrt();
    let starts = segment_starts(p, cfg.n_topics);
    let mut data = vec![0.0; p * d];
    let mut anchor = vec![0.0; d];
    for (k, &s) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(p);
        for a in anchor.iter_mut() {
            *a = cfg.anchor_scale * rng.sample::<f64, _>(StandardNormal);
        }
        for c in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            data[s * d + c] = anchor[c] + cfg.sigma * z;
        }
        for t in s + 1..end {
            for c in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let prev = data[(t - 1) * d + c];
                data[t * d + c] = anchor[c] + cfg.rho * (prev - anchor[c]) + innov * z;
            }
        }
    }
    EmbeddingSequence::new(format!("syn-{}-{index:06}", cfg.seed), p, d, data).expect("sized by config")
}

pub fn generate_corpus(cfg: &TestbedConfig) -> Result<Vec<EmbeddingSequence>> {
    cfg.validate()?;
    Ok((0..cfg.corpus_size).map(|i| generate_sequence(cfg, i)).collect())
}

/// Largest adjacent-row cosine distance, `max_t (1 − cos(x_t, x_{t+1}))`.
pub fn discontinuity_baseline(seq: &EmbeddingSequence) -> Result<f64> {
    if seq.positions() < 2 {
        return Err(Error::data("discontinuity baseline needs at least 2 positions"));
    }
    Ok((0..seq.positions() - 1)
        .map(|t| 1.0 - cosine(seq.row(t), seq.row(t + 1)))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// One pair per sequence, kinds assigned round-robin, corruption seeds
/// derived from `seed` and the sequence index.
pub fn make_pairs(
    seqs: &[EmbeddingSequence],
    specs: &[CorruptionSpec],
    donor_pool: &[EmbeddingSequence],
    seed: u64,
) -> Result<Vec<ContrastivePair>> {
    if specs.is_empty() {
        return Err(Error::config("kinds", "no corruption kinds given"));
    }
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let spec = specs[i % specs.len()].with_seed(pair_seed(seed, i as u64));
            corrupt(s, &spec, donor_pool)
        })
        .collect()
}

/// splitmix64-style mix of a base seed and a counter.
pub fn pair_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// AUC of the discontinuity baseline on the valid pairs.
pub fn baseline_auc(pairs: &[ContrastivePair]) -> Result<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in pairs.iter().filter(|p| p.valid) {
        pos.push(discontinuity_baseline(&p.positive)?);
        neg.push(discontinuity_baseline(&p.negative)?);
    }
    auc(&pos, &neg)
}

/// Rejects a testbed whose shuffle/splice pairs the baseline cannot
/// separate, returning the baseline AUC otherwise.
pub fn learnability_gate(cfg: &TestbedConfig, n: usize) -> Result<f64> {
    let small = TestbedConfig {
        corpus_size: n,
        ..cfg.clone()
    };
    let corpus = generate_corpus(&small)?;
    let specs = [
        CorruptionSpec::new(CorruptionKind::Shuffle, 0),
        CorruptionSpec::new(CorruptionKind::Splice, 0),
    ];
    let pairs = make_pairs(&corpus, &specs, &corpus, cfg.seed)?;
    let a = baseline_auc(&pairs)?;
    if a < LEARNABILITY_FLOOR {
        return Err(Error::config(
            "testbed",
            format!("baseline AUC {a:.3} below learnability floor {LEARNABILITY_FLOOR}"),
        ));
    }
    Ok(a)
}
