//! Seeded synthetic workloads shared by the benchmarks.

use std::collections::HashMap;

use probgate_core::{ConfidenceScore, EvalLabel, GenerationRecord, SampleCase, ScoredToken};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "SELECT", " COUNT", "(", "*", ")", " FROM", " patients", " WHERE", " age", " >", " 50", " AND", " gender",
    " =", " 'F'", " admissions", " cost", " GROUP", " BY", " ward",
];

pub fn records(n: usize, len: usize, seed: u64) -> Vec<GenerationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let tokens: Vec<ScoredToken> = (0..len)
                .map(|_| {
                    let word = WORDS[rng.random_range(0..WORDS.len())];
                    ScoredToken::new(word, -rng.random_range(0.0..6.0)).unwrap()
                })
                .collect();
            let sql: String = tokens.iter().map(|t| t.text()).collect();
            GenerationRecord::new(format!("b{i}"), "", sql, tokens).unwrap()
        })
        .collect()
}

pub fn cases(n: usize, seed: u64) -> Vec<SampleCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = [
        SampleCase::AnsAnsweredCorrect,
        SampleCase::AnsAbstained,
        SampleCase::AnsAnsweredWrong,
        SampleCase::UnaAnswered,
        SampleCase::UnaAbstained,
    ];
    (0..n).map(|_| all[rng.random_range(0..all.len())]).collect()
}

/// Scores, labels and answerable accuracy for a sweep.
pub fn sweep_fixture(n: usize, seed: u64) -> (Vec<ConfidenceScore>, Vec<EvalLabel>, HashMap<String, bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut acc = HashMap::new();
    for i in 0..n {
        let id = format!("b{i}");
        let answerable = rng.random_bool(0.8);
        scores.push(ConfidenceScore {
            id: id.clone(),
            value: -rng.random_range(0.0..5.0),
            n_considered: 10,
            used_fallback: false,
        });
        if answerable {
            acc.insert(id.clone(), rng.random_bool(0.75));
            labels.push(EvalLabel::answerable(id, "SELECT 1"));
        } else {
            labels.push(EvalLabel::unanswerable(id));
        }
    }
    (scores, labels, acc)
}
