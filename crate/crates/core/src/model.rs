//! Shared record types passed between pipeline stages.
//!
//! Every type here validates its invariants at construction (including when
//! deserialized) and is immutable afterwards.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Score assigned to records that cannot be scored at all. Sorts below every
/// real score so the rank gate abstains on them first.
pub const UNSCORABLE: f64 = f64::MIN;

fn check_logprob(value: f64) -> std::result::Result<(), String> {
    if value.is_nan() {
        Err("log probability is NaN".into())
    } else if value > 0.0 {
        Err(format!("log probability {value} is positive"))
    } else {
        Ok(())
    }
}

/// A candidate token at one position of the generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub text: String,
    pub logprob: f64,
}

/// One generated token with its natural-log probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawToken")]
pub struct ScoredToken {
    text: String,
    logprob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    alternatives: Option<Vec<Alternative>>,
}

#[derive(Deserialize)]
struct RawToken {
    text: String,
    logprob: f64,
    #[serde(default)]
    alternatives: Option<Vec<Alternative>>,
}

impl TryFrom<RawToken> for ScoredToken {
    type Error = String;

    fn try_from(raw: RawToken) -> std::result::Result<Self, String> {
        ScoredToken::with_alternatives(raw.text, raw.logprob, raw.alternatives)
    }
}

impl ScoredToken {
    pub fn new(text: impl Into<String>, logprob: f64) -> std::result::Result<Self, String> {
        Self::with_alternatives(text, logprob, None)
    }

    /// Alternatives are stored sorted by descending log probability.
    pub fn with_alternatives(
        text: impl Into<String>,
        logprob: f64,
        alternatives: Option<Vec<Alternative>>,
    ) -> std::result::Result<Self, String> {
        check_logprob(logprob)?;
        let alternatives = match alternatives {
            Some(mut alts) => {
                for alt in &alts {
                    check_logprob(alt.logprob)
                        .map_err(|e| format!("alternative {:?}: {e}", alt.text))?;
                }
                alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
                Some(alts)
            }
            None => None,
        };
        Ok(Self {
            text: text.into(),
            logprob,
            alternatives,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn logprob(&self) -> f64 {
        self.logprob
    }

    pub fn alternatives(&self) -> Option<&[Alternative]> {
        self.alternatives.as_deref()
    }
}

/// One question's generated SQL and the token stream it was decoded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord")]
pub struct GenerationRecord {
    id: String,
    question: String,
    sql: String,
    tokens: Vec<ScoredToken>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default)]
    question: String,
    sql: String,
    tokens: Vec<ScoredToken>,
}

impl TryFrom<RawRecord> for GenerationRecord {
    type Error = Error;

    fn try_from(raw: RawRecord) -> Result<Self> {
        GenerationRecord::new(raw.id, raw.question, raw.sql, raw.tokens)
    }
}

impl GenerationRecord {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        sql: impl Into<String>,
        tokens: Vec<ScoredToken>,
    ) -> Result<Self> {
        let id = id.into();
        let sql = sql.into();
        if id.is_empty() {
            return Err(Error::validation(id, "empty id"));
        }
        if tokens.is_empty() && !sql.is_empty() {
            return Err(Error::validation(id, "non-empty sql with no tokens"));
        }
        Ok(Self {
            id,
            question: question.into(),
            sql,
            tokens,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn sql(&self) -> &str {
        &self.sql
    }

    pub fn tokens(&self) -> &[ScoredToken] {
        &self.tokens
    }
}

/// Gold annotation. A missing gold query marks the question unanswerable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalLabel {
    pub id: String,
    pub gold_sql: Option<String>,
}

impl EvalLabel {
    pub fn answerable(id: impl Into<String>, gold_sql: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            gold_sql: Some(gold_sql.into()),
        }
    }

    pub fn unanswerable(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            gold_sql: None,
        }
    }

    pub fn is_answerable(&self) -> bool {
        self.gold_sql.is_some()
    }
}

/// Confidence assigned to one record; higher means more confident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub id: String,
    pub value: f64,
    pub n_considered: usize,
    pub used_fallback: bool,
}

impl ConfidenceScore {
    pub fn unscorable(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            value: UNSCORABLE,
            n_considered: 0,
            used_fallback: false,
        }
    }

    pub fn is_unscorable(&self) -> bool {
        self.n_considered == 0
    }
}

/// Which stage decided the fate of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GateStage {
    Pass,
    RankGate,
    ExecutionGate,
}

/// Answer-or-abstain verdict for one record. `answer` is derived from the stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateDecision {
    pub id: String,
    pub stage: GateStage,
}

impl GateDecision {
    pub fn new(id: impl Into<String>, stage: GateStage) -> Self {
        Self {
            id: id.into(),
            stage,
        }
    }

    pub fn pass(id: impl Into<String>) -> Self {
        Self::new(id, GateStage::Pass)
    }

    pub fn answer(&self) -> bool {
        self.stage == GateStage::Pass
    }
}

#[derive(Serialize, Deserialize)]
struct DecisionWire {
    id: String,
    answer: bool,
    stage: GateStage,
}

impl Serialize for GateDecision {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        DecisionWire {
            id: self.id.clone(),
            answer: self.answer(),
            stage: self.stage,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GateDecision {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = DecisionWire::deserialize(deserializer)?;
        let decision = GateDecision::new(wire.id, wire.stage);
        if decision.answer() != wire.answer {
            return Err(serde::de::Error::custom(format!(
                "decision `{}`: answer={} contradicts stage {:?}",
                decision.id, wire.answer, wire.stage
            )));
        }
        Ok(decision)
    }
}

/// Penalty `c` applied to wrong answers and answered unanswerable questions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Fixed(f64),
    /// Resolves to the size of the evaluated set.
    NSamples,
}

/// Reliability-score configuration. Scores are reported on a ×100 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsConfig {
    pub penalty: Penalty,
}

impl RsConfig {
    pub const SCALE: f64 = 100.0;

    pub fn fixed(c: f64) -> Result<Self> {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::Config(format!("penalty must be a finite value >= 0, got {c}")));
        }
        Ok(Self {
            penalty: Penalty::Fixed(c),
        })
    }

    pub fn n_samples() -> Self {
        Self {
            penalty: Penalty::NSamples,
        }
    }

    /// The grid reported by default: c = 0, 5, 10, N.
    pub fn default_grid() -> Vec<RsConfig> {
        vec![
            Self::fixed(0.0).unwrap(),
            Self::fixed(5.0).unwrap(),
            Self::fixed(10.0).unwrap(),
            Self::n_samples(),
        ]
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for RsConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.penalty {
            Penalty::Fixed(c) => write!(f, "{c}"),
            Penalty::NSamples => f.write_str("N"),
        }
    }
}

impl FromStr for RsConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("n") {
            return Ok(Self::n_samples());
        }
        let c: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("penalty `{s}` is neither a number nor `N`")))?;
        Self::fixed(c)
    }
}

impl Serialize for RsConfig {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self.penalty {
            Penalty::Fixed(c) => serializer.serialize_f64(c),
            Penalty::NSamples => serializer.serialize_str("N"),
        }
    }
}

impl<'de> Deserialize<'de> for RsConfig {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Number(f64),
            Text(String),
        }
        match Wire::deserialize(deserializer)? {
            Wire::Number(c) => RsConfig::fixed(c),
            Wire::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Resolve the penalty for an evaluated set of `dataset_size` samples.
pub fn resolve_penalty(config: RsConfig, dataset_size: usize) -> f64 {
    match config.penalty {
        Penalty::Fixed(c) => c,
        Penalty::NSamples => dataset_size as f64,
    }
}
