//! Inference-time composition of frozen, independently trained branches:
//! `E = E_structural + gate · E_frequency + β · E_local`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::checkpoint;
use crate::corruption::ContrastivePair;
use crate::error::{Error, Result};
use crate::eval::{score_pairs, PairScores, ScoredPair};
use crate::kv::KvMap;
use crate::network::{ConstraintNetwork, EnergyReport};
use crate::sequence::EmbeddingSequence;

pub const DEFAULT_BETA: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchRole {
    Structural,
    Frequency,
    Local,
}

impl BranchRole {
    pub const ALL: [BranchRole; 3] = [BranchRole::Structural, BranchRole::Frequency, BranchRole::Local];

    pub fn name(self) -> &'static str {
        match self {
            BranchRole::Structural => "structural",
            BranchRole::Frequency => "frequency",
            BranchRole::Local => "local",
        }
    }
}

/// A frozen network plus the tag of the input view it consumes.
#[derive(Clone, Debug)]
pub struct Branch {
    pub net: Arc<ConstraintNetwork>,
    pub view: String,
}

impl Branch {
    pub fn new(net: ConstraintNetwork, view: impl Into<String>) -> Self {
        Branch {
            net: Arc::new(net),
            view: view.into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BranchEnsemble {
    pub structural: Branch,
    pub frequency: Option<Branch>,
    pub local: Option<Branch>,
    pub beta: f64,
    pub gate: bool,
}

/// One input sequence per active branch.
#[derive(Clone, Copy, Debug)]
pub struct Views<'a> {
    pub structural: &'a EmbeddingSequence,
    pub frequency: Option<&'a EmbeddingSequence>,
    pub local: Option<&'a EmbeddingSequence>,
}

impl<'a> Views<'a> {
    /// Every branch reads the same sequence.
    pub fn shared(seq: &'a EmbeddingSequence) -> Self {
        Views {
            structural: seq,
            frequency: Some(seq),
            local: Some(seq),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedEnergy {
    pub structural: EnergyReport,
    pub frequency: Option<EnergyReport>,
    pub local: Option<EnergyReport>,
    pub combined: f64,
}

/// Adds only the active terms, left to right, so with the gate closed the
/// result is exactly `E_s + β·E_l`.
pub fn combine(e_s: f64, e_f: Option<f64>, e_l: Option<f64>, gate: bool, beta: f64) -> f64 {
    let mut e = e_s;
    if let (true, Some(f)) = (gate, e_f) {
        e += f;
    }
    if let Some(l) = e_l {
        e += beta * l;
    }
    e
}

impl BranchEnsemble {
    pub fn single(structural: Branch) -> Self {
        BranchEnsemble {
            structural,
            frequency: None,
            local: None,
            beta: DEFAULT_BETA,
            gate: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be finite and >= 0"));
        }
        let dim = self.structural.net.config().input_dim;
        for (role, b) in self.branches().skip(1) {
            let d = b.net.config().input_dim;
            if d != dim {
                return Err(Error::RepresentationIncompatibility {
                    branch: role.name().to_string(),
                    expected: dim,
                    actual: d,
                });
            }
        }
        Ok(())
    }

    pub fn branches(&self) -> impl Iterator<Item = (BranchRole, &Branch)> {
        std::iter::once((BranchRole::Structural, &self.structural))
            .chain(self.frequency.iter().map(|b| (BranchRole::Frequency, b)))
            .chain(self.local.iter().map(|b| (BranchRole::Local, b)))
    }

    fn check_view(role: BranchRole, b: &Branch, seq: &EmbeddingSequence) -> Result<()> {
        let want = b.net.config().input_dim;
        if seq.dim() != want {
            return Err(Error::RepresentationIncompatibility {
                branch: role.name().to_string(),
                expected: want,
                actual: seq.dim(),
            });
        }
        Ok(())
    }

    fn run_branch<'v>(
        role: BranchRole,
        b: &Branch,
        views: &[Views<'v>],
        pick: fn(&Views<'v>) -> Option<&'v EmbeddingSequence>,
    ) -> Result<Vec<EnergyReport>> {
        let seqs = views
            .iter()
            .map(|v| {
                let s =
                    pick(v).ok_or_else(|| Error::data(format!("no input view for active branch `{}`", role.name())))?;
                Self::check_view(role, b, s)?;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        b.net.forward_batch(&seqs)
    }

    /// Scores many view sets at once; each branch runs one batched pass.
    pub fn compose_batch(&self, views: &[Views<'_>]) -> Result<Vec<ComposedEnergy>> {
        let s = Self::run_branch(BranchRole::Structural, &self.structural, views, |v| Some(v.structural))?;
        let f = match &self.frequency {
            Some(b) => Some(Self::run_branch(BranchRole::Frequency, b, views, |v| v.frequency)?),
            None => None,
        };
        let l = match &self.local {
            Some(b) => Some(Self::run_branch(BranchRole::Local, b, views, |v| v.local)?),
            None => None,
        };
        Ok(s.into_iter()
            .enumerate()
            .map(|(i, rs)| {
                let rf = f.as_ref().map(|v| v[i].clone());
                let rl = l.as_ref().map(|v| v[i].clone());
                let combined = combine(
                    rs.total_energy,
                    rf.as_ref().map(|r| r.total_energy),
                    rl.as_ref().map(|r| r.total_energy),
                    self.gate,
                    self.beta,
                );
                ComposedEnergy {
                    structural: rs,
                    frequency: rf,
                    local: rl,
                    combined,
                }
            })
            .collect())
    }

    pub fn compose_energy(&self, views: Views<'_>) -> Result<ComposedEnergy> {
        Ok(self.compose_batch(&[views])?.remove(0))
    }
}

/// Outcome of gate calibration, kept for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub gate: bool,
    pub gap: f64,
    pub tau: f64,
}

/// Mean `E_neg − E_pos` of `net` over the valid pairs.
pub fn mean_gap(net: &ConstraintNetwork, pairs: &[ContrastivePair]) -> Result<f64> {
    let gaps: Vec<f64> = score_pairs(net, pairs)?
        .iter()
        .filter_map(|p| p.scores.as_ref().map(|s| s.gap()))
        .collect();
    if gaps.is_empty() {
        return Err(Error::data("calibration set has no valid pairs"));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Opens the gate iff the branch's mean calibration gap exceeds `tau`.
pub fn calibrate_gate(freq: &ConstraintNetwork, calibration: &[ContrastivePair], tau: f64) -> Result<GateDecision> {
    if calibration.is_empty() {
        return Err(Error::data("empty calibration set"));
    }
    let gap = mean_gap(freq, calibration)?;
    let gate = gap > tau;
    log::info!("gate calibration: gap {gap} vs tau {tau} -> gate {}", gate as u8);
    Ok(GateDecision { gate, gap, tau })
}

/// Default threshold: half the structural branch's calibration gap.
pub fn default_tau(structural: &ConstraintNetwork, calibration: &[ContrastivePair]) -> Result<f64> {
    Ok(0.5 * mean_gap(structural, calibration)?)
}

/// Scores pairs by combined energy, every branch reading the pair's own
/// sequences. Each report carries the combined energy as its only entry,
/// so the result plugs into `paired_accuracy`.
pub fn score_composed(ens: &BranchEnsemble, pairs: &[ContrastivePair]) -> Result<Vec<ScoredPair>> {
    ens.validate()?;
    let views: Vec<Views<'_>> = pairs
        .iter()
        .filter(|p| p.valid)
        .flat_map(|p| [Views::shared(&p.positive), Views::shared(&p.negative)])
        .collect();
    let mut composed = ens.compose_batch(&views)?.into_iter();
    let mut next = || -> Result<EnergyReport> {
        let c = composed.next().expect("two composed energies per valid pair");
        EnergyReport::from_per_position(vec![c.combined], 0.0)
    };
    pairs
        .iter()
        .map(|p| {
            let scores = if p.valid {
                Some(PairScores {
                    pos: next()?,
                    neg: next()?,
                })
            } else {
                None
            };
            Ok(ScoredPair {
                kind: p.kind.clone(),
                valid: p.valid,
                corrupted_positions: p.corrupted_positions.clone(),
                scores,
                features: None,
            })
        })
        .collect()
}

/// Share of each active branch in the summed absolute terms, averaged over
/// both twins of every valid pair. Shares sum to 1 unless every term is 0,
/// in which case all shares are 0.
pub fn branch_contribution(ens: &BranchEnsemble, pairs: &[ContrastivePair]) -> Result<Vec<(BranchRole, f64)>> {
    let seqs: Vec<&EmbeddingSequence> = pairs
        .iter()
        .filter(|p| p.valid)
        .flat_map(|p| [&p.positive, &p.negative])
        .collect();
    let views: Vec<Views<'_>> = seqs.iter().map(|s| Views::shared(s)).collect();
    let composed = ens.compose_batch(&views)?;
    let mut sums = [0.0f64; 3];
    for c in &composed {
        sums[0] += c.structural.total_energy.abs();
        if ens.gate {
            if let Some(f) = &c.frequency {
                sums[1] += f.total_energy.abs();
            }
        }
        if let Some(l) = &c.local {
            sums[2] += (ens.beta * l.total_energy).abs();
        }
    }
    let total: f64 = sums.iter().sum();
    Ok(ens
        .branches()
        .map(|(role, _)| {
            let i = BranchRole::ALL.iter().position(|r| *r == role).unwrap();
            (role, if total > 0.0 { sums[i] / total } else { 0.0 })
        })
        .collect())
}

/// Key-value manifest naming branch checkpoints, view tags, β, gate and τ.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleManifest {
    pub structural: (PathBuf, String),
    pub frequency: Option<(PathBuf, String)>,
    pub local: Option<(PathBuf, String)>,
    pub beta: f64,
    pub gate: bool,
    pub tau: Option<f64>,
}

impl EnsembleManifest {
    pub fn from_kv(m: &KvMap, base: &Path) -> Result<Self> {
        m.check_known(&[
            "structural.checkpoint",
            "structural.view",
            "frequency.checkpoint",
            "frequency.view",
            "local.checkpoint",
            "local.view",
            "beta",
            "gate",
            "tau",
        ])?;
        let branch = |name: &str| -> Option<(PathBuf, String)> {
            let p = m.get(&format!("{name}.checkpoint"))?;
            let view = m.get(&format!("{name}.view")).unwrap_or("default").to_string();
            Some((base.join(p), view))
        };
        let structural = branch("structural").ok_or_else(|| Error::config("structural.checkpoint", "missing"))?;
        let gate: u8 = m.get_or("gate", 0)?;
        if gate > 1 {
            return Err(Error::config("gate", "must be 0 or 1"));
        }
        Ok(EnsembleManifest {
            structural,
            frequency: branch("frequency"),
            local: branch("local"),
            beta: m.get_or("beta", DEFAULT_BETA)?,
            gate: gate == 1,
            tau: match m.get("tau") {
                Some(_) => Some(m.require("tau")?),
                None => None,
            },
        })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        let mut put = |name: &str, b: &Option<(PathBuf, String)>| {
            if let Some((p, v)) = b {
                m.set(format!("{name}.checkpoint"), p.display());
                m.set(format!("{name}.view"), v);
            }
        };
        put("structural", &Some(self.structural.clone()));
        put("frequency", &self.frequency);
        put("local", &self.local);
        m.set("beta", self.beta);
        m.set("gate", self.gate as u8);
        if let Some(t) = self.tau {
            m.set("tau", t);
        }
        m
    }

    /// Loads every checkpoint and checks representation compatibility.
    pub fn load(&self) -> Result<BranchEnsemble> {
        let load = |(p, v): &(PathBuf, String)| -> Result<Branch> { Ok(Branch::new(checkpoint::load(p)?, v.clone())) };
        let ens = BranchEnsemble {
            structural: load(&self.structural)?,
            frequency: self.frequency.as_ref().map(load).transpose()?,
            local: self.local.as_ref().map(load).transpose()?,
            beta: self.beta,
            gate: self.gate,
        };
        ens.validate()?;
        Ok(ens)
    }
}
