//! Diagnostics over trained networks: displacement geometry, alpha sweeps,
//! per-position heatmaps, propagation profiles and localization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corruption::{corrupt, ContrastivePair, CorruptionSpec};
use crate::error::{Error, Result};
use crate::eval::{paired_accuracy, score_pairs, PairScores, ScoredPair};
use crate::network::{ConstraintNetwork, EnergyReport};
use crate::sequence::{cosine, EmbeddingSequence};
use crate::testbed::pair_seed;

pub const DEFAULT_ALPHAS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementRecord {
    pub kind: String,
    pub mean_displacement: Vec<f64>,
    pub samples: usize,
}

/// Per-pair displacement vectors (pooled corrupted minus pooled original)
/// grouped by kind, valid pairs only.
pub fn pair_displacements(scored: &[ScoredPair]) -> BTreeMap<String, Vec<Vec<f64>>> {
    let mut out: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for p in scored.iter().filter(|p| p.valid) {
        if let Some((pos, neg)) = &p.features {
            let d = neg.iter().zip(pos).map(|(n, o)| n - o).collect();
            out.entry(p.kind.clone()).or_default().push(d);
        }
    }
    out
}

fn mean_vector(vs: &[&Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, x) in m.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= vs.len() as f64);
    m
}

/// Corrupts the first `n_samples` sequences once per kind and averages the
/// displacement of every valid pair. Kinds left with fewer than two valid
/// pairs are dropped with a warning.
pub fn displacement_records(
    net: &ConstraintNetwork,
    corpus: &[EmbeddingSequence],
    specs: &[CorruptionSpec],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<DisplacementRecord>> {
    let per_pair = displacement_samples(net, corpus, specs, n_samples, seed)?;
    Ok(records_from(&per_pair, None))
}

fn displacement_samples(
    net: &ConstraintNetwork,
    corpus: &[EmbeddingSequence],
    specs: &[CorruptionSpec],
    n_samples: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    if n_samples < 2 {
        return Err(Error::config("n_samples", "need at least 2 samples per kind"));
    }
    if corpus.len() < n_samples {
        return Err(Error::data(format!(
            "corpus has {} sequences, {n_samples} requested",
            corpus.len()
        )));
    }
    let mut pairs = Vec::with_capacity(n_samples * specs.len());
    for (k, spec) in specs.iter().enumerate() {
        for (i, s) in corpus[..n_samples].iter().enumerate() {
            let sd = pair_seed(seed, (k * n_samples + i) as u64);
            pairs.push(corrupt(s, &spec.with_seed(sd), corpus)?);
        }
    }
    let scored = score_pairs(net, &pairs)?;
    let mut per_pair = pair_displacements(&scored);
    for spec in specs {
        let name = spec.kind.name();
        per_pair.entry(name.to_string()).or_default();
    }
    Ok(per_pair)
}

/// `keep[i]` selects which samples of each kind take part; `None` keeps all.
fn records_from(per_pair: &BTreeMap<String, Vec<Vec<f64>>>, keep: Option<&[bool]>) -> Vec<DisplacementRecord> {
    let mut out = Vec::new();
    for (kind, vs) in per_pair {
        let chosen: Vec<&Vec<f64>> = vs
            .iter()
            .enumerate()
            .filter(|(i, _)| keep.is_none_or(|k| k.get(*i).copied().unwrap_or(false)))
            .map(|(_, v)| v)
            .collect();
        if chosen.len() < 2 {
            log::warn!(
                "kind `{kind}` has {} valid pairs; excluded from displacement analysis",
                chosen.len()
            );
            continue;
        }
        out.push(DisplacementRecord {
            kind: kind.clone(),
            mean_displacement: mean_vector(&chosen),
            samples: chosen.len(),
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub kinds: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Pairwise cosine similarity of mean displacements. The diagonal is
    /// exactly 1 and the lower triangle mirrors the upper one.
    pub fn from_records(records: &[DisplacementRecord]) -> Self {
        let n = records.len();
        let mut values = vec![vec![0.0; n]; n];
        for i in 0..n {
            values[i][i] = 1.0;
            for j in i + 1..n {
                let c = cosine(&records[i].mean_displacement, &records[j].mean_displacement).clamp(-1.0, 1.0);
                values[i][j] = c;
                values[j][i] = c;
            }
        }
        SimilarityMatrix {
            kinds: records.iter().map(|r| r.kind.clone()).collect(),
            values,
        }
    }

    pub fn index_of(&self, kind: &str) -> Option<usize> {
        self.kinds.iter().position(|k| k == kind)
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.values[self.index_of(a)?][self.index_of(b)?])
    }

    /// Mean similarity of `kind` to every other kind.
    pub fn mean_off_diagonal(&self, kind: &str) -> Option<f64> {
        let i = self.index_of(kind)?;
        let n = self.kinds.len();
        if n < 2 {
            return None;
        }
        let s: f64 = (0..n).filter(|&j| j != i).map(|j| self.values[i][j]).sum();
        Some(s / (n - 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind");
        for k in &self.kinds {
            write!(s, ",{k}").unwrap();
        }
        s.push('\n');
        for (k, row) in self.kinds.iter().zip(&self.values) {
            s.push_str(k);
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn displacement_matrix(
    net: &ConstraintNetwork,
    corpus: &[EmbeddingSequence],
    specs: &[CorruptionSpec],
    n_samples: usize,
    seed: u64,
) -> Result<SimilarityMatrix> {
    Ok(SimilarityMatrix::from_records(&displacement_records(
        net, corpus, specs, n_samples, seed,
    )?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub full: SimilarityMatrix,
    pub subsets: Vec<SimilarityMatrix>,
    /// Per entry, max minus min across subsets.
    pub deviation: Vec<Vec<f64>>,
}

impl StabilityReport {
    pub fn max_deviation(&self) -> f64 {
        self.deviation.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// Recomputes the matrix on explicit subsets (`keep` masks over sample
/// index) and reports the spread of every entry.
pub fn stability_from_masks(
    per_pair: &BTreeMap<String, Vec<Vec<f64>>>,
    masks: &[Vec<bool>],
) -> Result<StabilityReport> {
    let full = SimilarityMatrix::from_records(&records_from(per_pair, None));
    let n = full.kinds.len();
    let mut subsets = Vec::with_capacity(masks.len());
    for m in masks {
        let sub = SimilarityMatrix::from_records(&records_from(per_pair, Some(m)));
        if sub.kinds != full.kinds {
            return Err(Error::data("a subsample lost every valid pair of some kind"));
        }
        subsets.push(sub);
    }
    let mut deviation = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (lo, hi) = subsets.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.values[i][j]), hi.max(s.values[i][j]))
            });
            deviation[i][j] = if subsets.is_empty() { 0.0 } else { hi - lo };
        }
    }
    Ok(StabilityReport {
        full,
        subsets,
        deviation,
    })
}

/// `k_subsets` seeded half-subsamples of `n` samples per kind.
pub fn subsample_stability(
    net: &ConstraintNetwork,
    corpus: &[EmbeddingSequence],
    specs: &[CorruptionSpec],
    n: usize,
    k_subsets: usize,
    seed: u64,
) -> Result<StabilityReport> {
    if n < 4 {
        return Err(Error::config("n", "need at least 4 samples to split into halves"));
    }
    if k_subsets == 0 {
        return Err(Error::config("k_subsets", "must be positive"));
    }
    let per_pair = displacement_samples(net, corpus, specs, n, seed)?;
    let most = per_pair.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let masks: Vec<Vec<bool>> = (0..k_subsets)
        .map(|_| {
            let mut idx: Vec<usize> = (0..most).collect();
            idx.shuffle(&mut rng);
            let mut m = vec![false; most];
            for &i in &idx[..most / 2] {
                m[i] = true;
            }
            m
        })
        .collect();
    stability_from_masks(&per_pair, &masks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaRow {
    pub alpha: f64,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Re-aggregates stored per-position energies under each alpha; the network
/// is never run again.
pub fn alpha_sweep(scored: &[ScoredPair], alphas: &[f64]) -> Result<Vec<AlphaRow>> {
    let kinds: Vec<String> = Vec::new();
    alphas
        .iter()
        .map(|&alpha| {
            let re: Vec<ScoredPair> = scored
                .iter()
                .map(|p| {
                    let scores = match &p.scores {
                        Some(s) => Some(PairScores {
                            pos: EnergyReport::from_per_position(s.pos.per_position.clone(), alpha)?,
                            neg: EnergyReport::from_per_position(s.neg.per_position.clone(), alpha)?,
                        }),
                        None => None,
                    };
                    Ok(ScoredPair {
                        scores,
                        features: None,
                        ..p.clone()
                    })
                })
                .collect::<Result<_>>()?;
            let r = paired_accuracy(&re, &kinds);
            Ok(AlphaRow {
                alpha,
                auc: r.auc,
                accuracy: r.overall.accuracy,
            })
        })
        .collect()
}

pub fn alpha_table_csv(rows: &[AlphaRow]) -> String {
    let mut s = String::from("alpha,auc,accuracy\n");
    let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for r in rows {
        writeln!(s, "{},{},{}", r.alpha, f(r.auc), f(r.accuracy)).unwrap();
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapLayout {
    Sequence,
    Grid { rows: usize, cols: usize },
}

impl std::str::FromStr for HeatmapLayout {
    type Err = Error;

    /// `sequence` or `RxC`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "sequence" {
            return Ok(HeatmapLayout::Sequence);
        }
        let bad = || Error::config("layout", format!("expected `sequence` or `RxC`, got `{s}`"));
        let (r, c) = s.split_once('x').ok_or_else(bad)?;
        Ok(HeatmapLayout::Grid {
            rows: r.trim().parse().map_err(|_| bad())?,
            cols: c.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// CSV of per-position energies. Sequence layout: header `energy` (plus
/// `corrupted` when a mask is given), one row per position. Grid layout:
/// header `c0..c{C-1}`, R rows in row-major order; the mask, if any,
/// follows as a second grid of 0/1 after a blank line.
///
/// Values use the shortest representation that parses back to the same f64.
pub fn heatmap_csv(per_position: &[f64], layout: HeatmapLayout, corrupted: Option<&[usize]>) -> Result<String> {
    let p = per_position.len();
    let mask: Option<Vec<u8>> = match corrupted {
        Some(c) => {
            let mut m = vec![0u8; p];
            for &i in c {
                *m.get_mut(i)
                    .ok_or_else(|| Error::data(format!("corrupted position {i} outside {p} positions")))? = 1;
            }
            Some(m)
        }
        None => None,
    };
    let mut s = String::new();
    match layout {
        HeatmapLayout::Sequence => {
            s.push_str(if mask.is_some() {
                "energy,corrupted\n"
            } else {
                "energy\n"
            });
            for (i, e) in per_position.iter().enumerate() {
                match &mask {
                    Some(m) => writeln!(s, "{e},{}", m[i]).unwrap(),
                    None => writeln!(s, "{e}").unwrap(),
                }
            }
        }
        HeatmapLayout::Grid { rows, cols } => {
            if rows.checked_mul(cols) != Some(p) {
                return Err(Error::config(
                    "layout",
                    format!("grid {rows}x{cols} does not hold {p} positions"),
                ));
            }
            let header = (0..cols).map(|c| format!("c{c}")).collect::<Vec<_>>().join(",");
            let grid = |s: &mut String, cell: &dyn Fn(usize) -> String| {
                s.push_str(&header);
                s.push('\n');
                for r in 0..rows {
                    let line: Vec<String> = (0..cols).map(|c| cell(r * cols + c)).collect();
                    s.push_str(&line.join(","));
                    s.push('\n');
                }
            };
            grid(&mut s, &|i| per_position[i].to_string());
            if let Some(m) = &mask {
                s.push('\n');
                grid(&mut s, &|i| m[i].to_string());
            }
        }
    }
    Ok(s)
}

/// Reads the energies back out of [`heatmap_csv`] output, in position order.
pub fn parse_heatmap_csv(text: &str) -> Result<Vec<f64>> {
    let block = text.split("\n\n").next().unwrap_or("");
    let mut lines = block.lines();
    let header = lines.next().ok_or_else(|| Error::data("empty heatmap"))?;
    let sequence = header.starts_with("energy");
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        let vals = if sequence { &cells[..1] } else { &cells[..] };
        for v in vals {
            out.push(v.parse().map_err(|_| Error::data(format!("bad heatmap value `{v}`")))?);
        }
    }
    Ok(out)
}

/// Signed distance from `i` to its nearest corrupted position; a position
/// equidistant from one before and one after takes the positive offset.
fn nearest_offset(i: usize, corrupted: &[usize]) -> i64 {
    let mut best: Option<i64> = None;
    for &c in corrupted {
        let d = i as i64 - c as i64;
        best = Some(match best {
            None => d,
            Some(b) if d.abs() < b.abs() || (d.abs() == b.abs() && d > b) => d,
            Some(b) => b,
        });
    }
    best.expect("nonempty corrupted set")
}

/// Sums and counts of elevation `e_neg − e_pos` per signed offset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PropagationProfile {
    pub by_offset: BTreeMap<i64, (f64, usize)>,
}

impl PropagationProfile {
    pub fn add_pair(&mut self, p: &ScoredPair) -> Result<()> {
        let s = match (&p.scores, p.valid) {
            (Some(s), true) => s,
            _ => return Err(Error::data("propagation needs a valid scored pair")),
        };
        if p.corrupted_positions.is_empty() {
            return Err(Error::data("pair has no corrupted positions"));
        }
        if s.pos.per_position.len() != s.neg.per_position.len() {
            return Err(Error::data("twins differ in length"));
        }
        for (i, (a, b)) in s.pos.per_position.iter().zip(&s.neg.per_position).enumerate() {
            let slot = self
                .by_offset
                .entry(nearest_offset(i, &p.corrupted_positions))
                .or_default();
            slot.0 += b - a;
            slot.1 += 1;
        }
        Ok(())
    }

    pub fn elevation(&self, offset: i64) -> Option<f64> {
        self.by_offset.get(&offset).map(|(s, n)| s / *n as f64)
    }

    /// Position-weighted mean elevation over an inclusive offset range.
    pub fn mean_over(&self, lo: i64, hi: i64) -> Option<f64> {
        let (s, n) = self
            .by_offset
            .range(lo..=hi)
            .fold((0.0, 0usize), |(s, n), (_, (ss, nn))| (s + ss, n + nn));
        (n > 0).then(|| s / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("offset,elevation,count\n");
        for (o, (sum, n)) in &self.by_offset {
            writeln!(s, "{o},{},{n}", sum / *n as f64).unwrap();
        }
        s
    }
}

pub fn propagation_profile(pair: &ContrastivePair, net: &ConstraintNetwork) -> Result<PropagationProfile> {
    if !pair.valid {
        return Err(Error::data("propagation needs a valid pair"));
    }
    let scored = score_pairs(net, std::slice::from_ref(pair))?;
    let mut prof = PropagationProfile::default();
    prof.add_pair(&scored[0])?;
    Ok(prof)
}

/// Profile pooled over every valid pair; invalid pairs are skipped.
pub fn pooled_propagation(scored: &[ScoredPair]) -> Result<PropagationProfile> {
    let mut prof = PropagationProfile::default();
    for p in scored.iter().filter(|p| p.valid && !p.corrupted_positions.is_empty()) {
        prof.add_pair(p)?;
    }
    Ok(prof)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    /// Valid pairs with both corrupted and untouched positions.
    pub eligible: usize,
    pub hits: usize,
}

impl LocalizationReport {
    pub fn fraction(&self) -> Option<f64> {
        (self.eligible > 0).then(|| self.hits as f64 / self.eligible as f64)
    }
}

/// Counts pairs whose corrupted twin has a higher mean energy on the
/// corrupted positions than on the untouched ones.
pub fn localization(scored: &[ScoredPair]) -> LocalizationReport {
    let mut eligible = 0;
    let mut hits = 0;
    for p in scored.iter().filter(|p| p.valid) {
        let Some(s) = &p.scores else { continue };
        let e = &s.neg.per_position;
        let mut hit = vec![false; e.len()];
        for &i in &p.corrupted_positions {
            if let Some(h) = hit.get_mut(i) {
                *h = true;
            }
        }
        let (mut sc, mut nc, mut su, mut nu) = (0.0, 0usize, 0.0, 0usize);
        for (v, h) in e.iter().zip(&hit) {
            if *h {
                sc += v;
                nc += 1;
            } else {
                su += v;
                nu += 1;
            }
        }
        if nc == 0 || nu == 0 {
            continue;
        }
        eligible += 1;
        hits += (sc / nc as f64 > su / nu as f64) as usize;
    }
    LocalizationReport { eligible, hits }
}
