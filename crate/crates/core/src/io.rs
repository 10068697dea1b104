//! Reading and writing on-disk artifacts.
//!
//! Line-oriented inputs (generations, labels, scores, decisions, training
//! chats) are JSONL; the prediction submission is one JSON object keyed by
//! id, with the string `"null"` marking an abstention.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SampleOutcome;
use crate::model::{Alternative, ConfidenceScore, EvalLabel, GateDecision, GenerationRecord, ScoredToken};

/// Prediction value meaning "abstain".
pub const ABSTAIN_MARKER: &str = "null";

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Parse each non-blank line as `T`, reporting 1-based line numbers.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, value));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn check_unique<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_owned()));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct TokenLine {
    text: String,
    logprob: f64,
    #[serde(default)]
    alternatives: Option<Vec<Alternative>>,
}

#[derive(Deserialize)]
struct GenerationLine {
    id: String,
    #[serde(default)]
    question: String,
    sql: String,
    tokens: Vec<TokenLine>,
}

pub fn read_generations(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let lines: Vec<(usize, GenerationLine)> = read_jsonl(path.as_ref())?;
    let mut records = Vec::with_capacity(lines.len());
    for (_, line) in lines {
        let tokens = line
            .tokens
            .into_iter()
            .map(|t| ScoredToken::with_alternatives(t.text, t.logprob, t.alternatives))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|msg| Error::validation(&line.id, msg))?;
        records.push(GenerationRecord::new(line.id, line.question, line.sql, tokens)?);
    }
    check_unique(records.iter().map(|r| r.id()))?;
    Ok(records)
}

pub fn write_generations(path: impl AsRef<Path>, records: &[GenerationRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<EvalLabel>> {
    let labels: Vec<EvalLabel> = read_jsonl(path.as_ref())?.into_iter().map(|(_, l)| l).collect();
    check_unique(labels.iter().map(|l| l.id.as_str()))?;
    Ok(labels)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ConfidenceScore>> {
    let scores: Vec<ConfidenceScore> = read_jsonl(path.as_ref())?.into_iter().map(|(_, s)| s).collect();
    check_unique(scores.iter().map(|s| s.id.as_str()))?;
    Ok(scores)
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[ConfidenceScore]) -> Result<()> {
    write_jsonl(path, scores)
}

pub fn read_decisions(path: impl AsRef<Path>) -> Result<Vec<GateDecision>> {
    let decisions: Vec<GateDecision> = read_jsonl(path.as_ref())?.into_iter().map(|(_, d)| d).collect();
    check_unique(decisions.iter().map(|d| d.id.as_str()))?;
    Ok(decisions)
}

pub fn write_decisions(path: impl AsRef<Path>, decisions: &[GateDecision]) -> Result<()> {
    write_jsonl(path, decisions)
}

pub fn write_outcomes(path: impl AsRef<Path>, outcomes: &[SampleOutcome]) -> Result<()> {
    write_jsonl(path, outcomes)
}

/// Prediction per id, in record order.
pub type PredictionFile = IndexMap<String, String>;

/// Join decisions with records: abstentions become `"null"`, answers carry
/// the record's SQL verbatim. The join must be total in both directions.
pub fn build_predictions(decisions: &[GateDecision], records: &[GenerationRecord]) -> Result<PredictionFile> {
    let by_id: HashMap<&str, &GateDecision> = decisions.iter().map(|d| (d.id.as_str(), d)).collect();
    if by_id.len() != decisions.len() {
        check_unique(decisions.iter().map(|d| d.id.as_str()))?;
    }
    let record_ids: HashSet<&str> = records.iter().map(|r| r.id()).collect();
    if let Some(orphan) = decisions.iter().find(|d| !record_ids.contains(d.id.as_str())) {
        return Err(Error::MissingJoin(orphan.id.clone()));
    }
    let mut out = PredictionFile::with_capacity(records.len());
    for record in records {
        let decision = by_id
            .get(record.id())
            .ok_or_else(|| Error::MissingJoin(record.id().to_owned()))?;
        let prediction = if decision.answer() {
            record.sql().to_owned()
        } else {
            ABSTAIN_MARKER.to_owned()
        };
        out.insert(record.id().to_owned(), prediction);
    }
    Ok(out)
}

pub fn write_predictions(
    decisions: &[GateDecision],
    records: &[GenerationRecord],
    path: impl AsRef<Path>,
) -> Result<PredictionFile> {
    let predictions = build_predictions(decisions, records)?;
    let path = path.as_ref();
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, &predictions)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(predictions)
}

/// Read a submission. A JSON `null` value is accepted as an abstention too.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionFile> {
    let path = path.as_ref();
    let raw: IndexMap<String, Option<String>> = serde_json::from_reader(open(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(raw
        .into_iter()
        .map(|(id, p)| (id, p.unwrap_or_else(|| ABSTAIN_MARKER.to_owned())))
        .collect())
}

pub fn is_abstention(prediction: &str) -> bool {
    prediction == ABSTAIN_MARKER
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExample {
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingPairs {
    /// (question, gold SQL)
    pub pairs: Vec<(String, String)>,
    /// Examples whose assistant turn was the abstain marker.
    pub dropped_unanswerable: usize,
}

/// Extract (question, SQL) pairs from `[system, user, assistant]` chats,
/// dropping unanswerable examples.
pub fn read_training_pairs(path: impl AsRef<Path>) -> Result<TrainingPairs> {
    let path = path.as_ref();
    let mut out = TrainingPairs::default();
    for (line, example) in read_jsonl::<ChatExample>(path)? {
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let [system, user, assistant] = example.messages.as_slice() else {
            return Err(bad(format!("expected 3 messages, found {}", example.messages.len())));
        };
        for (msg, role) in [(system, "system"), (user, "user"), (assistant, "assistant")] {
            if msg.role != role {
                return Err(bad(format!("expected role `{role}`, found `{}`", msg.role)));
            }
        }
        if assistant.content.trim() == ABSTAIN_MARKER {
            out.dropped_unanswerable += 1;
        } else {
            out.pairs.push((user.content.clone(), assistant.content.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GateStage;
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn generations_basic() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "g.jsonl",
            r#"{"id":"q1","question":"how many patients","sql":"SELECT COUNT(*) FROM patients","tokens":[{"text":"SELECT","logprob":-0.01},{"text":" COUNT","logprob":-0.2}]}"#,
        );
        let recs = read_generations(&p).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id(), "q1");
        assert_eq!(recs[0].tokens()[1].logprob(), -0.2);
        assert!(read_generations(write(&dir, "e.jsonl", "")).unwrap().is_empty());
    }

    #[test]
    fn generations_errors() {
        let dir = tempfile::tempdir().unwrap();
        let pos = write(&dir, "p.jsonl", r#"{"id":"q7","question":"","sql":"x","tokens":[{"text":"x","logprob":0.3}]}"#);
        match read_generations(&pos) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, "q7"),
            other => panic!("{other:?}"),
        }
        let body = "{\"id\":\"a\",\"sql\":\"\",\"tokens\":[]}\n\n{not json}\n";
        match read_generations(write(&dir, "m.jsonl", body)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = "{\"id\":\"a\",\"sql\":\"\",\"tokens\":[]}\n{\"id\":\"a\",\"sql\":\"\",\"tokens\":[]}\n";
        assert!(matches!(read_generations(write(&dir, "d.jsonl", dup)), Err(Error::DuplicateId(_))));
        assert!(matches!(read_generations(dir.path().join("absent.jsonl")), Err(Error::Io { .. })));
    }

    #[test]
    fn labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.jsonl", "{\"id\":\"q1\",\"gold_sql\":\"SELECT 1\"}\n{\"id\":\"q2\",\"gold_sql\":null}\n");
        let labels = read_labels(&p).unwrap();
        assert!(labels[0].is_answerable());
        assert!(!labels[1].is_answerable());
        let dup = write(&dir, "d.jsonl", "{\"id\":\"q1\",\"gold_sql\":null}\n{\"id\":\"q1\",\"gold_sql\":\"x\"}\n");
        assert!(matches!(read_labels(&dup), Err(Error::DuplicateId(id)) if id == "q1"));
    }

    fn rec(id: &str, sql: &str) -> GenerationRecord {
        GenerationRecord::new(id, "q", sql, vec![ScoredToken::new(sql, -0.5).unwrap()]).unwrap()
    }

    #[test]
    fn predictions() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![rec("q1", "SELECT 1"), rec("q2", "SELECT 2")];
        let decisions = vec![GateDecision::pass("q1"), GateDecision::new("q2", GateStage::RankGate)];
        let path = dir.path().join("out/predictions.json");
        let written = write_predictions(&decisions, &records, &path).unwrap();
        assert_eq!(written["q1"], "SELECT 1");
        assert_eq!(written["q2"], "null");
        let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(parsed, serde_json::json!({"q1": "SELECT 1", "q2": "null"}));
        assert_eq!(read_predictions(&path).unwrap(), written);

        let orphan = vec![GateDecision::pass("q1"), GateDecision::pass("q2"), GateDecision::pass("q9")];
        assert!(matches!(build_predictions(&orphan, &records), Err(Error::MissingJoin(id)) if id == "q9"));
        assert!(matches!(build_predictions(&decisions[..1], &records), Err(Error::MissingJoin(id)) if id == "q2"));

        let lenient = write(&dir, "n.json", r#"{"a": null, "b": "SELECT 1"}"#);
        assert_eq!(read_predictions(&lenient).unwrap()["a"], "null");
    }

    #[test]
    fn training_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let sys = r#"{"role":"system","content":"You are SQLgpt"}"#;
        let line = |user: &str, asst: &str| {
            format!(r#"{{"messages":[{sys},{{"role":"user","content":"{user}"}},{{"role":"assistant","content":"{asst}"}}]}}"#)
        };
        let body = format!("{}\n{}\n", line("Q", "SELECT 1"), line("Q2", "null"));
        let got = read_training_pairs(write(&dir, "t.jsonl", &body)).unwrap();
        assert_eq!(got.pairs, vec![("Q".to_string(), "SELECT 1".to_string())]);
        assert_eq!(got.dropped_unanswerable, 1);

        let four = format!(
            r#"{{"messages":[{sys},{sys},{{"role":"user","content":"Q"}},{{"role":"assistant","content":"x"}}]}}"#
        );
        assert!(matches!(read_training_pairs(write(&dir, "f.jsonl", &four)), Err(Error::Parse { line: 1, .. })));
    }

    fn token() -> impl Strategy<Value = ScoredToken> {
        ("[ a-zA-Z_,()*]{0,8}", -30.0f64..=0.0).prop_map(|(t, lp)| ScoredToken::new(t, lp).unwrap())
    }

    proptest! {
        #[test]
        fn generations_round_trip(toks in prop::collection::vec(prop::collection::vec(token(), 1..12), 0..6)) {
            let records: Vec<GenerationRecord> = toks.into_iter().enumerate().map(|(i, t)| {
                let sql: String = t.iter().map(|x| x.text()).collect();
                GenerationRecord::new(format!("q{i}"), format!("question {i}?"), sql, t).unwrap()
            }).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("g.jsonl");
            write_generations(&path, &records).unwrap();
            prop_assert_eq!(read_generations(&path).unwrap(), records);
        }
    }
}
