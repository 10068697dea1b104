//! Reliability score RS(c) and the score-distribution histogram.
//!
//! Each sample falls into one of five cases:
//!
//! | label        | decision | Acc | value |
//! |--------------|----------|-----|-------|
//! | answerable   | answer   | 1   | +1    |
//! | answerable   | abstain  |     | 0     |
//! | answerable   | answer   | 0   | -c    |
//! | unanswerable | answer   |     | -c    |
//! | unanswerable | abstain  |     | +1    |
//!
//! RS(c) is 100 times the mean value over the evaluated set.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{resolve_penalty, ConfidenceScore, EvalLabel, GateDecision, RsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SampleCase {
    AnsAnsweredCorrect,
    AnsAbstained,
    AnsAnsweredWrong,
    UnaAnswered,
    UnaAbstained,
}

impl SampleCase {
    pub fn value(self, c: f64) -> f64 {
        match self {
            SampleCase::AnsAnsweredCorrect | SampleCase::UnaAbstained => 1.0,
            SampleCase::AnsAbstained => 0.0,
            SampleCase::AnsAnsweredWrong | SampleCase::UnaAnswered => -c,
        }
    }

    pub fn is_penalized(self) -> bool {
        matches!(self, SampleCase::AnsAnsweredWrong | SampleCase::UnaAnswered)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: String,
    pub case: SampleCase,
}

/// Case assignment from the raw facts. `acc` is only consulted for answered
/// answerable samples.
pub fn classify(id: &str, answerable: bool, answered: bool, acc: Option<bool>) -> Result<SampleCase> {
    Ok(match (answerable, answered) {
        (true, true) => match acc {
            Some(true) => SampleCase::AnsAnsweredCorrect,
            Some(false) => SampleCase::AnsAnsweredWrong,
            None => {
                return Err(Error::Inconsistent(format!(
                    "answered answerable sample `{id}` has no execution accuracy"
                )))
            }
        },
        (true, false) => SampleCase::AnsAbstained,
        (false, true) => SampleCase::UnaAnswered,
        (false, false) => SampleCase::UnaAbstained,
    })
}

pub fn classify_sample(label: &EvalLabel, decision: &GateDecision, acc: Option<bool>) -> Result<SampleOutcome> {
    if label.id != decision.id {
        return Err(Error::MissingJoin(decision.id.clone()));
    }
    let case = classify(&label.id, label.is_answerable(), decision.answer(), acc)?;
    Ok(SampleOutcome {
        id: label.id.clone(),
        case,
    })
}

/// Counts per case, in declaration order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseCounts {
    pub ans_answered_correct: usize,
    pub ans_abstained: usize,
    pub ans_answered_wrong: usize,
    pub una_answered: usize,
    pub una_abstained: usize,
}

impl CaseCounts {
    pub fn add(&mut self, case: SampleCase) {
        match case {
            SampleCase::AnsAnsweredCorrect => self.ans_answered_correct += 1,
            SampleCase::AnsAbstained => self.ans_abstained += 1,
            SampleCase::AnsAnsweredWrong => self.ans_answered_wrong += 1,
            SampleCase::UnaAnswered => self.una_answered += 1,
            SampleCase::UnaAbstained => self.una_abstained += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.ans_answered_correct + self.ans_abstained + self.ans_answered_wrong + self.una_answered + self.una_abstained
    }

    pub fn rewarded(&self) -> usize {
        self.ans_answered_correct + self.una_abstained
    }

    pub fn penalized(&self) -> usize {
        self.ans_answered_wrong + self.una_answered
    }

    /// RS for these counts. Panics-free; `None` when there are no samples.
    pub fn rs(&self, config: RsConfig) -> Option<f64> {
        let n = self.total();
        if n == 0 {
            return None;
        }
        let c = resolve_penalty(config, n);
        let sum = self.rewarded() as f64 - c * self.penalized() as f64;
        Some(RsConfig::SCALE * sum / n as f64)
    }
}

impl<'a> FromIterator<&'a SampleCase> for CaseCounts {
    fn from_iter<I: IntoIterator<Item = &'a SampleCase>>(iter: I) -> Self {
        let mut counts = CaseCounts::default();
        for case in iter {
            counts.add(*case);
        }
        counts
    }
}

pub fn rs_score_cases(cases: &[SampleCase], config: RsConfig) -> Result<f64> {
    cases
        .iter()
        .collect::<CaseCounts>()
        .rs(config)
        .ok_or_else(|| Error::Inconsistent("cannot score an empty outcome set".into()))
}

pub fn rs_score(outcomes: &[SampleOutcome], config: RsConfig) -> Result<f64> {
    let cases: Vec<SampleCase> = outcomes.iter().map(|o| o.case).collect();
    rs_score_cases(&cases, config)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RsRow {
    pub penalty: String,
    pub c: f64,
    pub rs: f64,
}

pub fn rs_table(outcomes: &[SampleOutcome], penalty_grid: &[RsConfig]) -> Result<Vec<RsRow>> {
    if penalty_grid.is_empty() {
        return Err(Error::Config("penalty grid is empty".into()));
    }
    penalty_grid
        .iter()
        .map(|config| {
            Ok(RsRow {
                penalty: config.label(),
                c: resolve_penalty(*config, outcomes.len()),
                rs: rs_score(outcomes, *config)?,
            })
        })
        .collect()
}

pub fn write_rs_table<W: Write>(rows: &[RsRow], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io("<rs table>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramSpec {
    pub bin_width: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bin_width: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub answerable: usize,
    pub unanswerable: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    /// Ascending by lower edge; the last bin ends at 0.
    pub bins: Vec<HistogramBin>,
    pub answerable_mean: Option<f64>,
    pub unanswerable_mean: Option<f64>,
}

impl Histogram {
    pub fn series_total(&self, answerable: bool) -> usize {
        self.bins
            .iter()
            .map(|b| if answerable { b.answerable } else { b.unanswerable })
            .sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        for bin in &self.bins {
            writer.serialize(bin)?;
        }
        writer.flush().map_err(|e| Error::io("<histogram>", e))?;
        Ok(())
    }
}

/// Bin scores into two label series over `[floor(min/w)*w, 0]`.
///
/// Bin `i` covers `[i*w, (i+1)*w)`; a score of exactly 0 lands in the last
/// bin. Unscorable sentinels are clipped into the lowest bin and excluded
/// from the series means.
pub fn score_histogram(
    scores: &[ConfidenceScore],
    labels: &[EvalLabel],
    spec: HistogramSpec,
) -> Result<Histogram> {
    let width = spec.bin_width;
    if width.is_nan() || width <= 0.0 || !width.is_finite() {
        return Err(Error::Config(format!("bin width must be positive, got {width}")));
    }
    let by_id: HashMap<&str, bool> = labels.iter().map(|l| (l.id.as_str(), l.is_answerable())).collect();

    let finite_min = scores
        .iter()
        .filter(|s| !s.is_unscorable())
        .map(|s| s.value.min(0.0))
        .fold(0.0_f64, f64::min);
    let lowest = (finite_min / width).floor() as i64;
    let lowest = lowest.min(-1);
    let n_bins = (-lowest) as usize;

    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| {
            let idx = lowest + i as i64;
            HistogramBin {
                lower: idx as f64 * width,
                upper: (idx + 1) as f64 * width,
                answerable: 0,
                unanswerable: 0,
            }
        })
        .collect();

    let mut sums = [(0.0_f64, 0usize); 2];
    for score in scores {
        let answerable = *by_id
            .get(score.id.as_str())
            .ok_or_else(|| Error::MissingJoin(score.id.clone()))?;
        let slot = if score.is_unscorable() {
            0
        } else {
            let idx = ((score.value.min(0.0) / width).floor() as i64).clamp(lowest, -1);
            let acc = &mut sums[usize::from(answerable)];
            acc.0 += score.value;
            acc.1 += 1;
            (idx - lowest) as usize
        };
        if answerable {
            bins[slot].answerable += 1;
        } else {
            bins[slot].unanswerable += 1;
        }
    }

    let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
    Ok(Histogram {
        bin_width: width,
        bins,
        answerable_mean: mean(sums[1]),
        unanswerable_mean: mean(sums[0]),
    })
}
