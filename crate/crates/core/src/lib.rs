//! Reliability gating for text-to-SQL generations.
//!
//! The pipeline scores each generated query by the mean of its lowest
//! non-keyword token log probabilities, abstains on the least confident
//! records, abstains again on queries that fail to execute, and evaluates
//! the result with the penalty-weighted reliability score RS(c).

pub mod config;
pub mod error;
pub mod exec;
pub mod gating;
pub mod io;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scoring;

pub use error::{Error, Result};
pub use exec::{Database, ExecStatus, ExecutionOutcome};
pub use gating::{gate_by_absolute, gate_by_rank, k_from_fraction, sweep_k, GateConfig, GateMode, SweepResult};
pub use lexicon::{default_lexicon, is_reserved, ReservedLexicon};
pub use metrics::{rs_score, rs_table, SampleCase, SampleOutcome};
pub use model::{
    resolve_penalty, Alternative, ConfidenceScore, EvalLabel, GateDecision, GateStage, GenerationRecord, Penalty,
    RsConfig, ScoredToken,
};
pub use scoring::{calc_log_bottom_k, max_entropy_score, score_dataset, ScorerConfig, ScorerKind};
