#![allow(dead_code)]

use std::path::{Path, PathBuf};

use probgate_core::{GenerationRecord, ScoredToken};
use rand::Rng;
use rusqlite::Connection;

pub fn fixture_db(dir: &Path) -> PathBuf {
    let path = dir.join("ehr.db");
    let conn = Connection::open(&path).unwrap();
    let mut sql = String::from(
        "CREATE TABLE patients (id INTEGER PRIMARY KEY, age INTEGER, gender TEXT);
         CREATE TABLE admissions (id INTEGER PRIMARY KEY, patient_id INTEGER, cost REAL, ward TEXT);",
    );
    for i in 1..=40 {
        let gender = if i % 3 == 0 { "F" } else { "M" };
        sql.push_str(&format!("INSERT INTO patients VALUES ({i}, {}, '{gender}');", 20 + (i * 7) % 60));
    }
    for i in 1..=80 {
        let ward = ["icu", "er", "cardio", "onco"][i % 4];
        sql.push_str(&format!(
            "INSERT INTO admissions VALUES ({i}, {}, {:.2}, '{ward}');",
            1 + (i * 13) % 40,
            100.0 + (i as f64) * 17.25
        ));
    }
    conn.execute_batch(&sql).unwrap();
    path
}

/// Queries that execute on the fixture database, each with a distinct result.
pub const VALID_SQL: &[&str] = &[
    "SELECT COUNT(*) FROM patients",
    "SELECT COUNT(*) FROM admissions",
    "SELECT age FROM patients WHERE id = 7",
    "SELECT AVG(cost) FROM admissions",
    "SELECT gender, COUNT(*) FROM patients GROUP BY gender",
    "SELECT id FROM patients WHERE age > 50 ORDER BY id",
    "SELECT MAX(cost) FROM admissions WHERE ward = 'icu'",
    "SELECT DISTINCT ward FROM admissions",
    "SELECT patient_id FROM admissions WHERE cost > 1000",
    "SELECT MIN(age) FROM patients",
];

pub const BROKEN_SQL: &[&str] = &[
    "SELEC age FROM patients",
    "SELECT age FROM patients WHERE",
    "SELECT weight FROM patients",
    "SELECT * FROM diagnoses",
    "SELECT COUNT(* FROM admissions",
    "SELECT ward FROM admission",
];

/// Split SQL into word tokens with leading spaces, the way chat APIs emit them.
pub fn tokenize(sql: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (i, word) in sql.split(' ').enumerate() {
        if i == 0 {
            out.push(word.to_owned());
        } else {
            out.push(format!(" {word}"));
        }
    }
    out
}

/// A record whose content tokens draw log probabilities from `content`
/// and whose structural tokens are near-certain.
pub fn record_with(
    id: &str,
    sql: &str,
    rng: &mut impl Rng,
    mut content: impl FnMut(&mut dyn rand::RngCore) -> f64,
) -> GenerationRecord {
    let lex = probgate_core::default_lexicon();
    let tokens = tokenize(sql)
        .into_iter()
        .map(|t| {
            let lp = if lex.is_reserved(&t) {
                -rng.random_range(0.0..0.02)
            } else {
                content(rng).min(0.0)
            };
            ScoredToken::new(t, lp).unwrap()
        })
        .collect();
    GenerationRecord::new(id, format!("question {id}"), sql, tokens).unwrap()
}

pub fn file_hash(path: &Path) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

/// One line per criterion. Written to the raw stderr handle so it shows up
/// even when the test harness captures output.
pub fn report(id: u32, name: &str, passed: bool, detail: impl std::fmt::Display) {
    use std::io::Write;
    let tag = if passed { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] criterion {id:>2}: {name} ({detail})\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(passed, "criterion {id} failed: {name} ({detail})");
}
