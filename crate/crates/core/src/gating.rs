//! Turning confidence scores into answer/abstain decisions.
//!
//! The rank gate abstains on the `k` lowest scores under the total order
//! (value ascending, then id ascending). `k` can be fixed, derived from an
//! expected unanswerable fraction, or chosen by sweeping RS(c) over a
//! labeled set.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{classify, CaseCounts};
use crate::model::{ConfidenceScore, EvalLabel, GateDecision, GateStage, RsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GateMode {
    FixedK,
    Fraction,
    Absolute,
    Sweep,
}

/// Gate configuration; exactly the parameter matching the mode is carried.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateConfig {
    FixedK(usize),
    Fraction(f64),
    Absolute(f64),
    Sweep(RsConfig),
}

impl GateConfig {
    pub fn mode(&self) -> GateMode {
        match self {
            GateConfig::FixedK(_) => GateMode::FixedK,
            GateConfig::Fraction(_) => GateMode::Fraction,
            GateConfig::Absolute(_) => GateMode::Absolute,
            GateConfig::Sweep(_) => GateMode::Sweep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GateConfig::Fraction(f) if !(0.0..=1.0).contains(&f) => {
                Err(Error::Config(format!("fraction must lie in [0, 1], got {f}")))
            }
            GateConfig::Absolute(t) if t.is_nan() || t > 0.0 => {
                Err(Error::Config(format!("absolute threshold must be <= 0, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

fn score_order(a: &ConfidenceScore, b: &ConfidenceScore) -> Ordering {
    a.value.total_cmp(&b.value).then_with(|| a.id.cmp(&b.id))
}

/// Indices of `scores` sorted by ascending confidence.
pub fn rank_order(scores: &[ConfidenceScore]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| score_order(&scores[a], &scores[b]));
    order
}

/// Abstain on exactly the `k` lowest-ranked records. Output follows input order.
pub fn gate_by_rank(scores: &[ConfidenceScore], k: usize) -> Result<Vec<GateDecision>> {
    if k > scores.len() {
        return Err(Error::GateOutOfRange { k, n: scores.len() });
    }
    let mut abstain = vec![false; scores.len()];
    for &idx in rank_order(scores).iter().take(k) {
        abstain[idx] = true;
    }
    Ok(scores
        .iter()
        .zip(abstain)
        .map(|(s, gated)| {
            let stage = if gated { GateStage::RankGate } else { GateStage::Pass };
            GateDecision::new(s.id.clone(), stage)
        })
        .collect())
}

/// Abstain on every record scoring strictly below `threshold`.
pub fn gate_by_absolute(scores: &[ConfidenceScore], threshold: f64) -> Vec<GateDecision> {
    scores
        .iter()
        .map(|s| {
            let stage = if s.value < threshold { GateStage::RankGate } else { GateStage::Pass };
            GateDecision::new(s.id.clone(), stage)
        })
        .collect()
}

/// `round(n * fraction)`, halves away from zero.
pub fn k_from_fraction(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction.clamp(0.0, 1.0)).round() as usize
}

/// Accuracy on answerable questions implied by the answer-everything RS(0).
///
/// With every question answered and c = 0 only correct answerable samples
/// score, so RS(0) = 100 * acc * (1 - u).
pub fn infer_answerable_accuracy(rs0_answer_all: f64, unanswerable_fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&unanswerable_fraction) {
        return Err(Error::Inconsistent(format!(
            "unanswerable fraction must lie in [0, 1), got {unanswerable_fraction}"
        )));
    }
    let acc = rs0_answer_all / (RsConfig::SCALE * (1.0 - unanswerable_fraction));
    if !(0.0..=1.0).contains(&acc) {
        return Err(Error::Inconsistent(format!(
            "RS(0)={rs0_answer_all} with unanswerable fraction {unanswerable_fraction} implies accuracy {acc}"
        )));
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub k: usize,
    pub rs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub k_star: usize,
    pub rs_star: f64,
    pub curve: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        for point in &self.curve {
            writer.serialize(point)?;
        }
        writer.flush().map_err(|e| Error::io("<sweep curve>", e))?;
        Ok(())
    }
}

/// Evaluate RS(penalty) for every k in `0..=n` and keep the best.
///
/// `accuracy` maps answerable ids to Acc(x); unanswerable ids need no entry.
/// Ties go to the smallest k.
pub fn sweep_k(
    scores: &[ConfidenceScore],
    labels: &[EvalLabel],
    accuracy: &HashMap<String, bool>,
    penalty: RsConfig,
) -> Result<SweepResult> {
    if scores.is_empty() {
        return Err(Error::Inconsistent("cannot sweep an empty score set".into()));
    }
    let by_id: HashMap<&str, &EvalLabel> = labels.iter().map(|l| (l.id.as_str(), l)).collect();
    let mut facts = Vec::with_capacity(scores.len());
    let mut seen = HashSet::with_capacity(scores.len());
    for s in scores {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateId(s.id.clone()));
        }
        let label = by_id.get(s.id.as_str()).ok_or_else(|| Error::MissingJoin(s.id.clone()))?;
        let acc = if label.is_answerable() {
            Some(*accuracy.get(&s.id).ok_or_else(|| {
                Error::Inconsistent(format!("no execution accuracy for answerable record `{}`", s.id))
            })?)
        } else {
            None
        };
        facts.push((label.is_answerable(), acc));
    }

    // rank position of each record; record i is abstained at k iff position[i] < k
    let mut position = vec![0; scores.len()];
    for (pos, idx) in rank_order(scores).into_iter().enumerate() {
        position[idx] = pos;
    }
    let curve = (0..=scores.len())
        .into_par_iter()
        .map(|k| {
            let mut counts = CaseCounts::default();
            for (i, (answerable, acc)) in facts.iter().enumerate() {
                counts.add(classify(&scores[i].id, *answerable, position[i] >= k, *acc)?);
            }
            let rs = counts.rs(penalty).expect("non-empty score set");
            Ok(SweepPoint { k, rs })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = curve
        .iter()
        .fold(&curve[0], |best, p| if p.rs > best.rs { p } else { best });
    Ok(SweepResult {
        k_star: best.k,
        rs_star: best.rs,
        curve,
    })
}
