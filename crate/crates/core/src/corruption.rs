//! Structure-breaking operators that turn a coherent sequence into the
//! negative twin of a contrastive pair.
//!
//! Every operator is a pure function of its inputs and `spec.seed`. The
//! validity flag and `corrupted_positions` are always recomputed from the
//! twins themselves, so an operator that happens to change nothing yields a
//! skipped pair rather than a mislabeled one.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::sequence::{norm, EmbeddingSequence};

/// Elementwise tolerance below which a row counts as unchanged.
pub const VALIDITY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    Shuffle,
    Splice,
    RegionSwap,
    OffsetShift,
    Smoothing,
    Repetition,
    Noise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::Shuffle,
        CorruptionKind::Splice,
        CorruptionKind::RegionSwap,
        CorruptionKind::OffsetShift,
        CorruptionKind::Smoothing,
        CorruptionKind::Repetition,
        CorruptionKind::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Shuffle => "shuffle",
            CorruptionKind::Splice => "splice",
            CorruptionKind::RegionSwap => "region_swap",
            CorruptionKind::OffsetShift => "offset_shift",
            CorruptionKind::Smoothing => "smoothing",
            CorruptionKind::Repetition => "repetition",
            CorruptionKind::Noise => "noise",
        }
    }

    pub fn registered() -> String {
        Self::ALL.map(|k| k.name()).join(", ")
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKind {
                kind: s.to_string(),
                registered: Self::registered(),
            })
    }
}

/// Parses a comma-separated kind list.
pub fn parse_kinds(list: &str) -> Result<Vec<CorruptionKind>> {
    crate::kv::split_list(list).iter().map(|s| s.parse()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Span length as a fraction of the sequence length (min one row).
    pub span_fraction: f64,
    /// Offset/noise strength relative to the sequence's mean row norm.
    pub magnitude: f64,
    /// Moving-average window for smoothing.
    pub window: usize,
    pub seed: u64,
}

impl CorruptionSpec {
    /// Per-kind defaults. Repetition uses a short span copied from directly
    /// before it, the subtlest form of the operator.
    pub fn new(kind: CorruptionKind, seed: u64) -> Self {
        CorruptionSpec {
            kind,
            span_fraction: if kind == CorruptionKind::Repetition { 0.05 } else { 0.25 },
            magnitude: 0.5,
            window: 5,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        CorruptionSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.span_fraction > 0.0 && self.span_fraction <= 1.0) {
            return Err(Error::config("span_fraction", "must lie in (0, 1]"));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::config("magnitude", "must be finite and >= 0"));
        }
        if self.window < 2 {
            return Err(Error::config("window", "must be >= 2"));
        }
        Ok(())
    }

    /// Reads `kind` plus optional `span_fraction`, `magnitude`, `window`,
    /// `seed` from a key-value block.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        m.check_known(&["kind", "span_fraction", "magnitude", "window", "seed"])?;
        let kind: CorruptionKind = m.get("kind").ok_or_else(|| Error::config("kind", "missing"))?.parse()?;
        let d = Self::new(kind, 0);
        let spec = CorruptionSpec {
            kind,
            span_fraction: m.get_or("span_fraction", d.span_fraction)?,
            magnitude: m.get_or("magnitude", d.magnitude)?,
            window: m.get_or("window", d.window)?,
            seed: m.get_or("seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("kind", self.kind);
        m.set("span_fraction", self.span_fraction);
        m.set("magnitude", self.magnitude);
        m.set("window", self.window);
        m.set("seed", self.seed);
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePair {
    pub positive: EmbeddingSequence,
    pub negative: EmbeddingSequence,
    pub kind: String,
    pub valid: bool,
    pub corrupted_positions: Vec<usize>,
}

impl ContrastivePair {
    /// Builds a pair and derives validity from the twins.
    pub fn from_twins(
        positive: EmbeddingSequence,
        negative: EmbeddingSequence,
        kind: impl Into<String>,
    ) -> Result<Self> {
        if !positive.same_shape(&negative) {
            return Err(Error::data(format!(
                "pair twins differ in shape: {}x{} vs {}x{}",
                positive.positions(),
                positive.dim(),
                negative.positions(),
                negative.dim()
            )));
        }
        let corrupted_positions = positive.differing_rows(&negative, VALIDITY_TOL);
        Ok(ContrastivePair {
            valid: !corrupted_positions.is_empty(),
            positive,
            negative,
            kind: kind.into(),
            corrupted_positions,
        })
    }

    fn skipped(seq: &EmbeddingSequence, kind: CorruptionKind) -> Self {
        ContrastivePair {
            positive: seq.clone(),
            negative: neg_of(seq),
            kind: kind.name().to_string(),
            valid: false,
            corrupted_positions: Vec::new(),
        }
    }

    fn finish(seq: &EmbeddingSequence, neg: EmbeddingSequence, kind: CorruptionKind) -> Self {
        Self::from_twins(seq.clone(), neg, kind.name()).expect("operators preserve shape")
    }

    /// Positions left untouched by the corruption.
    pub fn untouched_positions(&self) -> Vec<usize> {
        (0..self.positive.positions())
            .filter(|t| self.corrupted_positions.binary_search(t).is_err())
            .collect()
    }
}

/// `round(fraction · positions)`, at least one row and at most all rows.
pub fn span_len(positions: usize, fraction: f64) -> usize {
    ((fraction * positions as f64).round() as usize).clamp(1, positions)
}

fn rng_for(spec: &CorruptionSpec) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed)
}

fn neg_of(seq: &EmbeddingSequence) -> EmbeddingSequence {
    let mut n = seq.clone();
    n.label = crate::sequence::Label::Corrupted;
    n
}

/// Uniformly random permutation of `0..n` with no fixed points (n ≥ 2).
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n >= 2, "derangement needs at least two elements");
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

/// Reorders rows by `perm`: row `t` of the negative is row `perm[t]` of `seq`.
pub fn permute_rows(seq: &EmbeddingSequence, perm: &[usize]) -> Result<ContrastivePair> {
    if perm.len() != seq.positions() {
        return Err(Error::data("permutation length differs from sequence length"));
    }
    let mut neg = neg_of(seq);
    for (t, &src) in perm.iter().enumerate() {
        neg.row_mut(t).copy_from_slice(seq.row(src));
    }
    ContrastivePair::from_twins(seq.clone(), neg, CorruptionKind::Shuffle.name())
}

pub fn apply_shuffle(seq: &EmbeddingSequence, spec: &CorruptionSpec) -> ContrastivePair {
    if seq.positions() < 2 {
        return ContrastivePair::skipped(seq, CorruptionKind::Shuffle);
    }
    let perm = derangement(seq.positions(), &mut rng_for(spec));
    permute_rows(seq, &perm).expect("permutation sized to sequence")
}

fn check_dim(a: &EmbeddingSequence, b: &EmbeddingSequence) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

/// Overwrites `seq[start..start+len]` with `donor[donor_start..donor_start+len]`.
pub fn splice_at(
    seq: &EmbeddingSequence,
    donor: &EmbeddingSequence,
    start: usize,
    donor_start: usize,
    len: usize,
) -> Result<ContrastivePair> {
    check_dim(seq, donor)?;
    if start + len > seq.positions() || donor_start + len > donor.positions() {
        return Err(Error::data("splice span out of range"));
    }
    let mut neg = neg_of(seq);
    for i in 0..len {
        neg.row_mut(start + i).copy_from_slice(donor.row(donor_start + i));
    }
    Ok(ContrastivePair::finish(seq, neg, CorruptionKind::Splice))
}

/// Replaces a seeded span with a span taken from anywhere in `donor`.
pub fn apply_splice(
    seq: &EmbeddingSequence,
    donor: &EmbeddingSequence,
    spec: &CorruptionSpec,
) -> Result<ContrastivePair> {
    check_dim(seq, donor)?;
    let len = span_len(seq.positions(), spec.span_fraction);
    if donor.positions() < len {
        return Ok(ContrastivePair::skipped(seq, CorruptionKind::Splice));
    }
    let mut rng = rng_for(spec);
    let start = rng.random_range(0..=seq.positions() - len);
    let donor_start = rng.random_range(0..=donor.positions() - len);
    splice_at(seq, donor, start, donor_start, len)
}

/// Overwrites `a[start..start+len]` with the same rows of `b`.
pub fn swap_at(a: &EmbeddingSequence, b: &EmbeddingSequence, start: usize, len: usize) -> Result<ContrastivePair> {
    if !a.same_shape(b) {
        return Err(Error::data(format!(
            "region swap needs equal shapes: {}x{} vs {}x{}",
            a.positions(),
            a.dim(),
            b.positions(),
            b.dim()
        )));
    }
    if start + len > a.positions() {
        return Err(Error::data("region swap span out of range"));
    }
    let mut neg = neg_of(a);
    for t in start..start + len {
        neg.row_mut(t).copy_from_slice(b.row(t));
    }
    Ok(ContrastivePair::finish(a, neg, CorruptionKind::RegionSwap))
}

/// Like splice, but the replacement keeps its position index.
pub fn apply_region_swap(
    a: &EmbeddingSequence,
    b: &EmbeddingSequence,
    spec: &CorruptionSpec,
) -> Result<ContrastivePair> {
    let len = span_len(a.positions(), spec.span_fraction);
    let start = rng_for(spec).random_range(0..=a.positions() - len);
    swap_at(a, b, start, len)
}

/// Adds `shift` to every row in the span.
pub fn offset_at(seq: &EmbeddingSequence, start: usize, len: usize, shift: &[f64]) -> Result<ContrastivePair> {
    if shift.len() != seq.dim() {
        return Err(Error::DimMismatch {
            expected: seq.dim(),
            actual: shift.len(),
        });
    }
    if start + len > seq.positions() {
        return Err(Error::data("offset span out of range"));
    }
    let mut neg = neg_of(seq);
    for t in start..start + len {
        for (v, s) in neg.row_mut(t).iter_mut().zip(shift) {
            *v += s;
        }
    }
    Ok(ContrastivePair::finish(seq, neg, CorruptionKind::OffsetShift))
}

/// Shifts a span by a seeded unit direction scaled to
/// `magnitude × mean row norm`.
pub fn apply_offset_shift(seq: &EmbeddingSequence, spec: &CorruptionSpec) -> ContrastivePair {
    let len = span_len(seq.positions(), spec.span_fraction);
    let mut rng = rng_for(spec);
    let start = rng.random_range(0..=seq.positions() - len);
    let mut dir: Vec<f64> = (0..seq.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&dir);
    let scale = spec.magnitude * seq.mean_row_norm() / n;
    dir.iter_mut().for_each(|v| *v *= scale);
    offset_at(seq, start, len, &dir).expect("span and dim checked")
}

/// Replaces each row in the span with the mean of a `window`-row block
/// around it. The block is centered when possible and shifted inward at the
/// sequence edges; a window longer than the sequence averages everything.
/// Averages always read the original rows.
pub fn smooth_at(seq: &EmbeddingSequence, start: usize, len: usize, window: usize) -> Result<ContrastivePair> {
    if window < 2 {
        return Err(Error::config("window", "must be >= 2"));
    }
    let p = seq.positions();
    if start + len > p {
        return Err(Error::data("smoothing span out of range"));
    }
    let w = window.min(p);
    let mut neg = neg_of(seq);
    for t in start..start + len {
        let lo = t.saturating_sub(window / 2).min(p - w);
        let row = neg.row_mut(t);
        row.fill(0.0);
        for s in lo..lo + w {
            for (acc, v) in row.iter_mut().zip(seq.row(s)) {
                *acc += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= w as f64);
    }
    Ok(ContrastivePair::finish(seq, neg, CorruptionKind::Smoothing))
}

pub fn apply_smoothing(seq: &EmbeddingSequence, spec: &CorruptionSpec) -> ContrastivePair {
    let len = span_len(seq.positions(), spec.span_fraction);
    let start = rng_for(spec).random_range(0..=seq.positions() - len);
    smooth_at(seq, start, len, spec.window).expect("span in range")
}

/// Copies rows `src..src+len` over `dst..dst+len` (spans may not overlap
/// unless they coincide).
pub fn repeat_span(seq: &EmbeddingSequence, src: usize, dst: usize, len: usize) -> Result<ContrastivePair> {
    let p = seq.positions();
    if src + len > p || dst + len > p {
        return Err(Error::data("repetition span out of range"));
    }
    if src != dst && src.max(dst) < src.min(dst) + len {
        return Err(Error::data("repetition spans overlap"));
    }
    let mut neg = neg_of(seq);
    for i in 0..len {
        neg.row_mut(dst + i).copy_from_slice(seq.row(src + i));
    }
    Ok(ContrastivePair::finish(seq, neg, CorruptionKind::Repetition))
}

/// Overwrites a seeded span with a verbatim copy of the span immediately
/// before it.
pub fn apply_repetition(seq: &EmbeddingSequence, spec: &CorruptionSpec) -> ContrastivePair {
    let p = seq.positions();
    if p < 2 {
        return ContrastivePair::skipped(seq, CorruptionKind::Repetition);
    }
    let len = span_len(p, spec.span_fraction).min(p / 2);
    let dst = rng_for(spec).random_range(len..=p - len);
    repeat_span(seq, dst - len, dst, len).expect("spans in range")
}

/// Adds isotropic Gaussian noise to a span; the expected per-row noise norm
/// is `magnitude × mean row norm`.
pub fn apply_noise(seq: &EmbeddingSequence, spec: &CorruptionSpec) -> ContrastivePair {
    let len = span_len(seq.positions(), spec.span_fraction);
    let mut rng = rng_for(spec);
    let start = rng.random_range(0..=seq.positions() - len);
    let std = spec.magnitude * seq.mean_row_norm() / (seq.dim() as f64).sqrt();
    let mut neg = neg_of(seq);
    for t in start..start + len {
        for v in neg.row_mut(t) {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    ContrastivePair::finish(seq, neg, CorruptionKind::Noise)
}

/// Routes `spec` to its operator. Splice and region swap draw their partner
/// from `donor_pool`, skipping sequences with the same id; with no eligible
/// partner the pair is returned invalid.
pub fn corrupt(
    seq: &EmbeddingSequence,
    spec: &CorruptionSpec,
    donor_pool: &[EmbeddingSequence],
) -> Result<ContrastivePair> {
    spec.validate()?;
    match spec.kind {
        CorruptionKind::Shuffle => Ok(apply_shuffle(seq, spec)),
        CorruptionKind::OffsetShift => Ok(apply_offset_shift(seq, spec)),
        CorruptionKind::Smoothing => Ok(apply_smoothing(seq, spec)),
        CorruptionKind::Repetition => Ok(apply_repetition(seq, spec)),
        CorruptionKind::Noise => Ok(apply_noise(seq, spec)),
        CorruptionKind::Splice | CorruptionKind::RegionSwap => {
            let len = span_len(seq.positions(), spec.span_fraction);
            let eligible: Vec<&EmbeddingSequence> = donor_pool
                .iter()
                .filter(|d| d.id != seq.id && d.dim() == seq.dim())
                .filter(|d| match spec.kind {
                    CorruptionKind::Splice => d.positions() >= len,
                    _ => d.same_shape(seq),
                })
                .collect();
            if eligible.is_empty() {
                return Ok(ContrastivePair::skipped(seq, spec.kind));
            }
            // donor choice on its own stream so it does not perturb the
            // operator's placement draws
            let mut pick = rng_for(spec);
            pick.set_stream(1);
            let donor = eligible[pick.random_range(0..eligible.len())];
            if spec.kind == CorruptionKind::Splice {
                apply_splice(seq, donor, spec)
            } else {
                apply_region_swap(seq, donor, spec)
            }
        }
    }
}
