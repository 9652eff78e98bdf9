//! Paired accuracy, energy gaps and AUC with valid/skip bookkeeping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::corruption::{ContrastivePair, CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::network::{ConstraintNetwork, EnergyReport, Inference};
use crate::sequence::EmbeddingSequence;
use crate::testbed::make_pairs;

/// Above this many (pos, neg) comparisons AUC switches from exhaustive
/// counting to the rank-sum form. Both give identical results.
pub const EXHAUSTIVE_AUC_LIMIT: u128 = 10_000;

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::data("AUC needs at least one positive and one negative score"));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::data("AUC scores must be finite"));
    }
    Ok(())
}

/// `2U`: twice the number of (neg, pos) pairs with `neg > pos`, ties
/// counting half.
pub fn auc_twice_u_exhaustive(pos: &[f64], neg: &[f64]) -> u128 {
    let mut twice = 0u128;
    for &n in neg {
        for &p in pos {
            if n > p {
                twice += 2;
            } else if n == p {
                twice += 1;
            }
        }
    }
    twice
}

/// `2U` from doubled mid-ranks, so tie groups stay integral.
pub fn auc_twice_u_ranks(pos: &[f64], neg: &[f64]) -> u128 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, false))
        .chain(neg.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut twice_rank_sum = 0u128;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the doubled mid-rank (i+1)+(j+1)
        let twice_mid = (i + 1 + j + 1) as u128;
        let negs = all[i..=j].iter().filter(|x| x.1).count() as u128;
        twice_rank_sum += twice_mid * negs;
        i = j + 1;
    }
    let n = neg.len() as u128;
    twice_rank_sum - n * (n + 1)
}

/// Probability that a negative outscores a positive (ties count half).
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let denom = 2 * pos.len() as u128 * neg.len() as u128;
    let twice = if pos.len() as u128 * neg.len() as u128 <= EXHAUSTIVE_AUC_LIMIT {
        auc_twice_u_exhaustive(pos, neg)
    } else {
        auc_twice_u_ranks(pos, neg)
    };
    Ok(twice as f64 / denom as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub pos: EnergyReport,
    pub neg: EnergyReport,
}

impl PairScores {
    pub fn gap(&self) -> f64 {
        self.neg.total_energy - self.pos.total_energy
    }

    pub fn correct(&self) -> bool {
        self.neg.total_energy > self.pos.total_energy
    }
}

/// A pair after scoring. Invalid pairs are never run through the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub kind: String,
    pub valid: bool,
    pub corrupted_positions: Vec<usize>,
    pub scores: Option<PairScores>,
    /// Pooled penultimate-layer features (pos, neg), kept for displacement analysis.
    pub features: Option<(Vec<f64>, Vec<f64>)>,
}

/// Scores every valid pair in one batched pass.
pub fn score_pairs(net: &ConstraintNetwork, pairs: &[ContrastivePair]) -> Result<Vec<ScoredPair>> {
    let mut seqs: Vec<&EmbeddingSequence> = Vec::new();
    for p in pairs.iter().filter(|p| p.valid) {
        seqs.push(&p.positive);
        seqs.push(&p.negative);
    }
    let mut outs = net.infer(&seqs)?.into_iter();
    let mut next = || -> Inference { outs.next().expect("one inference per sequence") };
    Ok(pairs
        .iter()
        .map(|p| {
            let (scores, features) = if p.valid {
                let a = next();
                let b = next();
                (
                    Some(PairScores {
                        pos: a.report,
                        neg: b.report,
                    }),
                    Some((a.pooled_features, b.pooled_features)),
                )
            } else {
                (None, None)
            };
            ScoredPair {
                kind: p.kind.clone(),
                valid: p.valid,
                corrupted_positions: p.corrupted_positions.clone(),
                scores,
                features,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KindRow {
    pub kind: String,
    pub valid: usize,
    pub skip: usize,
    pub correct: usize,
    /// `None` when the row has no valid pairs.
    pub accuracy: Option<f64>,
    pub gap: Option<f64>,
}

impl KindRow {
    fn from_pairs<'a>(kind: &str, pairs: impl Iterator<Item = &'a ScoredPair>) -> Self {
        let mut skip = 0;
        let mut correct = 0;
        let mut gaps = Vec::new();
        for p in pairs {
            match &p.scores {
                Some(s) if p.valid => {
                    gaps.push(s.gap());
                    correct += s.correct() as usize;
                }
                _ => skip += 1,
            }
        }
        let valid = gaps.len();
        // summing in sorted order makes the gap independent of pair order
        gaps.sort_by(f64::total_cmp);
        KindRow {
            kind: kind.to_string(),
            valid,
            skip,
            correct,
            accuracy: (valid > 0).then(|| correct as f64 / valid as f64),
            gap: (valid > 0).then(|| gaps.iter().sum::<f64>() / valid as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedReport {
    pub kinds: Vec<KindRow>,
    pub trained: Option<KindRow>,
    pub unseen: Option<KindRow>,
    pub overall: KindRow,
    /// Pooled AUC over all valid pairs.
    pub auc: Option<f64>,
}

/// Per-kind and aggregate accuracy. Kinds listed in `trained_kinds` form
/// the trained row, all others the unseen row; kinds without a single valid
/// pair are reported but left out of every aggregate.
pub fn paired_accuracy(scored: &[ScoredPair], trained_kinds: &[String]) -> PairedReport {
    let mut by_kind: BTreeMap<&str, Vec<&ScoredPair>> = BTreeMap::new();
    for p in scored {
        by_kind.entry(p.kind.as_str()).or_default().push(p);
    }
    let kinds: Vec<KindRow> = by_kind
        .iter()
        .map(|(k, ps)| KindRow::from_pairs(k, ps.iter().copied()))
        .collect();
    let live: Vec<&str> = kinds.iter().filter(|r| r.valid > 0).map(|r| r.kind.as_str()).collect();
    let pool = |name: &str, pred: &dyn Fn(&str) -> bool| -> Option<KindRow> {
        let members: Vec<&str> = live.iter().copied().filter(|k| pred(k)).collect();
        if members.is_empty() {
            return None;
        }
        Some(KindRow::from_pairs(
            name,
            members.iter().flat_map(|k| by_kind[k].iter().copied()),
        ))
    };
    let is_trained = |k: &str| trained_kinds.iter().any(|t| t == k);
    let overall = pool("overall", &|_| true).unwrap_or_else(|| {
        let mut r = KindRow::from_pairs("overall", scored.iter());
        r.skip = scored.len();
        r
    });
    let (pos, neg): (Vec<f64>, Vec<f64>) = scored
        .iter()
        .filter_map(|p| p.scores.as_ref())
        .map(|s| (s.pos.total_energy, s.neg.total_energy))
        .unzip();
    PairedReport {
        trained: pool("trained", &|k| is_trained(k)),
        unseen: pool("unseen", &|k| !is_trained(k)),
        overall,
        auc: auc(&pos, &neg).ok(),
        kinds,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl PairedReport {
    pub fn rows(&self) -> impl Iterator<Item = &KindRow> {
        self.kinds
            .iter()
            .chain(self.trained.iter())
            .chain(self.unseen.iter())
            .chain(std::iter::once(&self.overall))
    }

    pub fn accuracy_of(&self, kind: &str) -> Option<f64> {
        self.kinds.iter().find(|r| r.kind == kind).and_then(|r| r.accuracy)
    }

    /// `kind,accuracy,gap,valid,skip`; aggregates appear as the rows
    /// `trained`, `unseen` and `overall`; undefined values are `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,accuracy,gap,valid,skip\n");
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.kind,
                fmt_opt(r.accuracy),
                fmt_opt(r.gap),
                r.valid,
                r.skip
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>9} {:>9} {:>7} {:>6}\n",
            "kind", "accuracy", "gap", "valid", "skip"
        );
        let line = |s: &mut String, r: &KindRow| {
            let (acc, gap) = match (r.accuracy, r.gap) {
                (Some(a), Some(g)) => (format!("{:.1}%", 100.0 * a), format!("{g:+.3}")),
                _ => ("no valid pairs".to_string(), String::new()),
            };
            let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>7} {:>6}", r.kind, acc, gap, r.valid, r.skip);
        };
        for r in &self.kinds {
            line(&mut s, r);
        }
        s.push_str(&"-".repeat(51));
        s.push('\n');
        for r in self
            .trained
            .iter()
            .chain(self.unseen.iter())
            .chain(std::iter::once(&self.overall))
        {
            line(&mut s, r);
        }
        if let Some(a) = self.auc {
            let _ = writeln!(s, "auc {a:.4}");
        }
        s
    }
}

/// Evaluates `net` on pairs built from `corpus` for every kind in both
/// sets (each sequence corrupted once per kind). The sets must not overlap.
pub fn evaluate_generalization(
    net: &ConstraintNetwork,
    trained: &[CorruptionKind],
    held_out: &[CorruptionKind],
    corpus: &[EmbeddingSequence],
    seed: u64,
) -> Result<(PairedReport, Vec<ScoredPair>)> {
    if let Some(k) = trained.iter().find(|k| held_out.contains(k)) {
        return Err(Error::config(
            "held_out",
            format!("kind `{k}` is both trained and held out"),
        ));
    }
    let mut pairs = Vec::new();
    for (ki, &kind) in trained.iter().chain(held_out).enumerate() {
        let spec = CorruptionSpec::new(kind, 0);
        let seed_k = crate::testbed::pair_seed(seed, 1_000_000 + ki as u64);
        pairs.extend(make_pairs(corpus, &[spec], corpus, seed_k)?);
    }
    let scored = score_pairs(net, &pairs)?;
    let names: Vec<String> = trained.iter().map(|k| k.name().to_string()).collect();
    Ok((paired_accuracy(&scored, &names), scored))
}
