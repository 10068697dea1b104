//! Stage functions behind the command-line subcommands.
//!
//! Each stage reads its inputs from disk and writes one artifact, so partial
//! reruns can start from any intermediate file. [`run_pipeline`] chains the
//! same functions, which keeps a one-shot run byte-identical to running the
//! stages by hand.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tracing::info;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exec::{execution_accuracy, grammatical_error_filter, Database};
use crate::gating::{gate_by_absolute, gate_by_rank, k_from_fraction, sweep_k, GateConfig, GateMode, SweepResult};
use crate::io::{self, is_abstention, PredictionFile};
use crate::lexicon::{default_lexicon, ReservedLexicon};
use crate::metrics::{
    classify, rs_table, score_histogram, write_rs_table, CaseCounts, Histogram, HistogramSpec, RsRow, SampleOutcome,
};
use crate::model::{ConfidenceScore, EvalLabel, GateDecision, GateStage, GenerationRecord, RsConfig};
use crate::scoring::{score_dataset, ScorerConfig};

pub const SCORES_FILE: &str = "scores.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const FILTERED_DECISIONS_FILE: &str = "decisions_exec.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const RS_TABLE_FILE: &str = "rs_table.csv";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const SWEEP_CURVE_FILE: &str = "sweep_curve.csv";
pub const SUMMARY_FILE: &str = "run_summary.json";

fn create_buffered(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn load_lexicon(path: Option<&Path>) -> Result<ReservedLexicon> {
    match path {
        Some(p) => ReservedLexicon::from_file(p),
        None => Ok(default_lexicon()),
    }
}

pub fn cmd_score(
    generations: &Path,
    scorer: &ScorerConfig,
    lex: &ReservedLexicon,
    out: &Path,
) -> Result<Vec<ConfidenceScore>> {
    let records = io::read_generations(generations)?;
    let scores = score_dataset(&records, scorer, lex)?;
    io::write_scores(out, &scores)?;
    info!(records = scores.len(), path = %out.display(), "scores written");
    Ok(scores)
}

/// Decisions plus the rank-gate size that produced them, when there was one.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub k: Option<usize>,
    pub decisions: Vec<GateDecision>,
}

pub fn apply_gate(scores: &[ConfidenceScore], gate: &GateConfig) -> Result<GateOutput> {
    gate.validate()?;
    match *gate {
        GateConfig::FixedK(k) => Ok(GateOutput {
            k: Some(k),
            decisions: gate_by_rank(scores, k)?,
        }),
        GateConfig::Fraction(f) => {
            let k = k_from_fraction(scores.len(), f);
            Ok(GateOutput {
                k: Some(k),
                decisions: gate_by_rank(scores, k)?,
            })
        }
        GateConfig::Absolute(threshold) => Ok(GateOutput {
            k: None,
            decisions: gate_by_absolute(scores, threshold),
        }),
        GateConfig::Sweep(_) => Err(Error::Config(
            "sweep mode needs labels and a database; run `sweep` first and gate with the reported k".into(),
        )),
    }
}

pub fn cmd_gate(scores: &Path, gate: &GateConfig, out: &Path) -> Result<GateOutput> {
    let scores = io::read_scores(scores)?;
    let output = apply_gate(&scores, gate)?;
    io::write_decisions(out, &output.decisions)?;
    Ok(output)
}

pub fn cmd_exec_filter(
    decisions: &Path,
    generations: &Path,
    db_path: &Path,
    timeout_ms: u64,
    out: &Path,
) -> Result<Vec<GateDecision>> {
    let db = Database::open_read_only(db_path, timeout_ms)?;
    let decisions = io::read_decisions(decisions)?;
    let records = io::read_generations(generations)?;
    let filtered = grammatical_error_filter(&decisions, &records, &db)?;
    io::write_decisions(out, &filtered)?;
    Ok(filtered)
}

pub fn cmd_predict(decisions: &Path, generations: &Path, out: &Path) -> Result<PredictionFile> {
    let decisions = io::read_decisions(decisions)?;
    let records = io::read_generations(generations)?;
    io::write_predictions(&decisions, &records, out)
}

/// Classify every labeled sample against a submission.
///
/// Predictions and labels must cover the same ids. The database is only
/// touched for answered answerable samples.
pub fn evaluate_predictions(
    predictions: &PredictionFile,
    labels: &[EvalLabel],
    db: Option<&Database>,
) -> Result<Vec<SampleOutcome>> {
    if predictions.len() != labels.len() {
        let labeled: std::collections::HashSet<&str> = labels.iter().map(|l| l.id.as_str()).collect();
        if let Some(extra) = predictions.keys().find(|id| !labeled.contains(id.as_str())) {
            return Err(Error::MissingJoin(extra.clone()));
        }
    }
    labels
        .iter()
        .map(|label| {
            let prediction = predictions
                .get(&label.id)
                .ok_or_else(|| Error::MissingJoin(label.id.clone()))?;
            let answered = !is_abstention(prediction);
            let acc = match (&label.gold_sql, answered) {
                (Some(gold), true) => {
                    let db = db.ok_or_else(|| {
                        Error::Config(format!("a database is required to check the answer for `{}`", label.id))
                    })?;
                    Some(execution_accuracy(&label.id, prediction, gold, db)?)
                }
                _ => None,
            };
            Ok(SampleOutcome {
                id: label.id.clone(),
                case: classify(&label.id, label.is_answerable(), answered, acc)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub counts: CaseCounts,
    pub rs_table: Vec<RsRow>,
    #[serde(skip)]
    pub outcomes: Vec<SampleOutcome>,
}

/// Writes `rs_table.csv` and `outcomes.jsonl` into `out_dir`.
pub fn cmd_evaluate(
    predictions: &Path,
    labels: &Path,
    db: Option<(&Path, u64)>,
    grid: &[RsConfig],
    out_dir: &Path,
) -> Result<Evaluation> {
    let predictions = io::read_predictions(predictions)?;
    let labels = io::read_labels(labels)?;
    let db = db
        .map(|(path, timeout)| Database::open_read_only(path, timeout))
        .transpose()?;
    let outcomes = evaluate_predictions(&predictions, &labels, db.as_ref())?;
    let table = rs_table(&outcomes, grid)?;
    write_rs_table(&table, create_buffered(&out_dir.join(RS_TABLE_FILE))?)?;
    io::write_outcomes(out_dir.join(OUTCOMES_FILE), &outcomes)?;
    Ok(Evaluation {
        counts: outcomes.iter().map(|o| &o.case).collect(),
        rs_table: table,
        outcomes,
    })
}

/// Acc(x) for every answerable labeled record, by executing its generated SQL.
pub fn answerable_accuracy(
    records: &[GenerationRecord],
    labels: &[EvalLabel],
    db: &Database,
) -> Result<HashMap<String, bool>> {
    let gold: HashMap<&str, &str> = labels
        .iter()
        .filter_map(|l| l.gold_sql.as_deref().map(|g| (l.id.as_str(), g)))
        .collect();
    records
        .iter()
        .filter_map(|r| gold.get(r.id()).map(|g| (r, *g)))
        .map(|(r, g)| Ok((r.id().to_owned(), execution_accuracy(r.id(), r.sql(), g, db)?)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    scores: &Path,
    generations: &Path,
    labels: &Path,
    db_path: &Path,
    timeout_ms: u64,
    penalty: RsConfig,
    out: &Path,
) -> Result<SweepResult> {
    let scores = io::read_scores(scores)?;
    let records = io::read_generations(generations)?;
    let labels = io::read_labels(labels)?;
    let db = Database::open_read_only(db_path, timeout_ms)?;
    let accuracy = answerable_accuracy(&records, &labels, &db)?;
    let result = sweep_k(&scores, &labels, &accuracy, penalty)?;
    result.write_csv(create_buffered(out)?)?;
    info!(k_star = result.k_star, rs_star = result.rs_star, "sweep finished");
    Ok(result)
}

pub fn cmd_histogram(scores: &Path, labels: &Path, spec: HistogramSpec, out: &Path) -> Result<Histogram> {
    let scores = io::read_scores(scores)?;
    let labels = io::read_labels(labels)?;
    let histogram = score_histogram(&scores, &labels, spec)?;
    histogram.write_csv(create_buffered(out)?)?;
    Ok(histogram)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageCounts {
    pub ingested: usize,
    pub scored: usize,
    pub unscorable: usize,
    pub rank_abstained: usize,
    pub exec_abstained: usize,
    pub answered: usize,
}

impl StageCounts {
    pub fn balanced(&self) -> bool {
        self.ingested == self.answered + self.rank_abstained + self.exec_abstained
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub penalty: RsConfig,
    pub k_star: usize,
    pub rs_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateSummary {
    pub mode: GateMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absolute_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineRun {
    pub config: RunConfig,
    pub stage_counts: StageCounts,
    pub gate: GateSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation>,
    /// Artifact file names, relative to the output directory.
    pub artifacts: Vec<String>,
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{what}` is required")))
}

/// Score, gate, filter by execution, write predictions and (with labels)
/// evaluate. Writes `run_summary.json` last.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineRun> {
    let generations = required(&config.generations, "generations")?;
    let out_dir = required(&config.out_dir, "out_dir")?;
    let scorer = config.scorer_config()?;
    let gate = config.gate_config()?;
    let lex = load_lexicon(config.lexicon.as_deref())?;
    let timeout = config.exec_timeout_ms();
    let db_path = config.db_path.as_deref();
    let mut artifacts = Vec::new();
    let path = |name: &str| out_dir.join(name);

    let scores = cmd_score(generations, &scorer, &lex, &path(SCORES_FILE))?;
    artifacts.push(SCORES_FILE.to_owned());

    let mut sweep = None;
    let effective_gate = match gate {
        GateConfig::Sweep(penalty) => {
            let labels = required(&config.labels, "labels")?;
            let db = db_path.ok_or_else(|| Error::Config("sweep mode requires `db_path`".into()))?;
            let result = cmd_sweep(&path(SCORES_FILE), generations, labels, db, timeout, penalty, &path(SWEEP_CURVE_FILE))?;
            artifacts.push(SWEEP_CURVE_FILE.to_owned());
            sweep = Some(SweepSummary {
                penalty,
                k_star: result.k_star,
                rs_star: result.rs_star,
            });
            GateConfig::FixedK(result.k_star)
        }
        other => other,
    };
    let gated = cmd_gate(&path(SCORES_FILE), &effective_gate, &path(DECISIONS_FILE))?;
    artifacts.push(DECISIONS_FILE.to_owned());

    let (final_decisions, decisions_file) = match db_path {
        Some(db) => {
            let filtered = cmd_exec_filter(&path(DECISIONS_FILE), generations, db, timeout, &path(FILTERED_DECISIONS_FILE))?;
            artifacts.push(FILTERED_DECISIONS_FILE.to_owned());
            (filtered, FILTERED_DECISIONS_FILE)
        }
        None => (gated.decisions.clone(), DECISIONS_FILE),
    };
    cmd_predict(&path(decisions_file), generations, &path(PREDICTIONS_FILE))?;
    artifacts.push(PREDICTIONS_FILE.to_owned());

    let evaluation = match &config.labels {
        Some(labels) => {
            let eval = cmd_evaluate(
                &path(PREDICTIONS_FILE),
                labels,
                db_path.map(|p| (p, timeout)),
                &config.penalty_grid(),
                out_dir,
            )?;
            artifacts.push(RS_TABLE_FILE.to_owned());
            artifacts.push(OUTCOMES_FILE.to_owned());
            cmd_histogram(&path(SCORES_FILE), labels, config.histogram_spec(), &path(HISTOGRAM_FILE))?;
            artifacts.push(HISTOGRAM_FILE.to_owned());
            Some(eval)
        }
        None => None,
    };

    let count = |stage: GateStage| final_decisions.iter().filter(|d| d.stage == stage).count();
    let unscorable = scores.iter().filter(|s| s.is_unscorable()).count();
    let stage_counts = StageCounts {
        ingested: scores.len(),
        scored: scores.len() - unscorable,
        unscorable,
        rank_abstained: count(GateStage::RankGate),
        exec_abstained: count(GateStage::ExecutionGate),
        answered: count(GateStage::Pass),
    };
    debug_assert!(stage_counts.balanced());

    artifacts.push(SUMMARY_FILE.to_owned());
    let run = PipelineRun {
        config: config.clone(),
        stage_counts,
        gate: GateSummary {
            mode: gate.mode(),
            k: gated.k,
            absolute_threshold: match gate {
                GateConfig::Absolute(t) => Some(t),
                _ => None,
            },
        },
        sweep,
        evaluation,
        artifacts,
    };
    let mut out = create_buffered(&path(SUMMARY_FILE))?;
    serde_json::to_writer_pretty(&mut out, &run)?;
    std::io::Write::write_all(&mut out, b"\n").map_err(|e| Error::io(path(SUMMARY_FILE), e))?;
    info!(?stage_counts, "pipeline finished");
    Ok(run)
}
