//! Per-record confidence scores.
//!
//! Two scorers share one convention: higher is more confident, so the rank
//! gate can always abstain on the lowest scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::lexicon::{is_reserved, ReservedLexicon};
use crate::model::{ConfidenceScore, GenerationRecord};

pub const DEFAULT_BOTTOM_T: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScorerKind {
    #[default]
    #[serde(alias = "probgate")]
    Probgate,
    #[serde(alias = "max_entropy")]
    MaxEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScorerConfig {
    pub t: usize,
    pub kind: ScorerKind,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            t: DEFAULT_BOTTOM_T,
            kind: ScorerKind::Probgate,
        }
    }
}

impl ScorerConfig {
    pub fn new(t: usize, kind: ScorerKind) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("bottom-t size must be at least 1".into()));
        }
        Ok(Self { t, kind })
    }
}

/// Mean of the `t` lowest log probabilities among non-reserved tokens.
///
/// When every token is reserved the mean is taken over all tokens instead
/// and `used_fallback` is set.
pub fn calc_log_bottom_k(
    record: &GenerationRecord,
    t: usize,
    lex: &ReservedLexicon,
) -> Result<ConfidenceScore> {
    let tokens = record.tokens();
    if tokens.is_empty() {
        return Err(Error::EmptyTokens(record.id().to_owned()));
    }
    let t = t.max(1);

    let mut logprobs: Vec<f64> = tokens
        .iter()
        .filter(|tok| !is_reserved(tok.text(), lex))
        .map(|tok| tok.logprob())
        .collect();
    let used_fallback = logprobs.is_empty();
    if used_fallback {
        logprobs = tokens.iter().map(|tok| tok.logprob()).collect();
    }

    logprobs.sort_by(f64::total_cmp);
    logprobs.truncate(t);
    let value = logprobs.iter().sum::<f64>() / logprobs.len() as f64;

    Ok(ConfidenceScore {
        id: record.id().to_owned(),
        value,
        n_considered: logprobs.len(),
        used_fallback,
    })
}

/// Shannon entropy (nats) of the renormalized alternative distribution.
pub fn token_entropy(logprobs: &[f64]) -> f64 {
    let max = logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return 0.0;
    }
    let weights: Vec<f64> = logprobs.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Negated maximum per-token entropy over the record.
pub fn max_entropy_score(record: &GenerationRecord) -> Result<ConfidenceScore> {
    let tokens = record.tokens();
    if tokens.is_empty() {
        return Err(Error::EmptyTokens(record.id().to_owned()));
    }
    let mut worst = 0.0_f64;
    for tok in tokens {
        let alts = match tok.alternatives() {
            Some(alts) if !alts.is_empty() => alts,
            _ => return Err(Error::MissingAlternatives(record.id().to_owned())),
        };
        let lps: Vec<f64> = alts.iter().map(|a| a.logprob).collect();
        worst = worst.max(token_entropy(&lps));
    }
    Ok(ConfidenceScore {
        id: record.id().to_owned(),
        value: -worst,
        n_considered: tokens.len(),
        used_fallback: false,
    })
}

pub fn score_record(
    record: &GenerationRecord,
    config: &ScorerConfig,
    lex: &ReservedLexicon,
) -> Result<ConfidenceScore> {
    match config.kind {
        ScorerKind::Probgate => calc_log_bottom_k(record, config.t, lex),
        ScorerKind::MaxEntropy => max_entropy_score(record),
    }
}

/// Score every record, preserving input order.
///
/// Records with no tokens get the unscorable sentinel. Any other scoring
/// failure (e.g. missing alternatives for the entropy scorer) is an error.
pub fn score_dataset(
    records: &[GenerationRecord],
    config: &ScorerConfig,
    lex: &ReservedLexicon,
) -> Result<Vec<ConfidenceScore>> {
    records
        .par_iter()
        .map(|record| match score_record(record, config, lex) {
            Err(Error::EmptyTokens(id)) => {
                warn!(%id, "record has no tokens; assigning the unscorable sentinel");
                Ok(ConfidenceScore::unscorable(id))
            }
            other => other,
        })
        .collect()
}
