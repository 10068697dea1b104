//! SQL reserved-word classification for generator tokens.
//!
//! Structural tokens (keywords, punctuation, whitespace) are excluded from
//! confidence scoring. Matching is token-local: a token is trimmed and
//! uppercased, then looked up. Subword fragments such as `"SEL"` never match
//! and count as content.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// The shipped reserved-word list, verbatim, duplicates included.
pub const RESERVED_WORDS: &[&str] = &[
    "SELECT",
    "AS",
    "IN",
    "COUNT",
    "FROM",
    "WHERE",
    "AND",
    "OR",
    "INSERT",
    "UPDATE",
    "DELETE",
    "CREATE",
    "DROP",
    "ALTER",
    "JOIN",
    "ON",
    "GROUP BY",
    "ORDER BY",
    "HAVING",
    "LIMIT",
    "UNION",
    "DISTINCT",
    "INDEX",
    "TABLE",
    "VIEW",
    "TRIGGER",
    "PRIMARY KEY",
    "FOREIGN KEY",
    "NULL",
    "NOT NULL",
    "UNIQUE",
    "CHECK",
    "DEFAULT",
    "INDEX",
    "SEQUENCE",
    "EXEC",
    "LIKE",
    "BETWEEN",
    "EXISTS",
    "CASE",
    "WHEN",
    "THEN",
    "ELSE",
    "END",
    "CAST",
    "CHAR",
    "VARCHAR",
    "BOOLEAN",
    "INTEGER",
    "DATE",
    "INTERVAL",
    "TIME",
    "TIMESTAMP",
    "YEAR",
    "MONTH",
    "DAY",
    "HOUR",
    "MINUTE",
    "SECOND",
    "ZONE",
    "CURRENT_DATE",
    "CURRENT_TIME",
    "CURRENT_TIMESTAMP",
    "TRUE",
    "FALSE",
];

/// Uppercase reserved words. Multi-word entries are stored both whole and
/// split into their constituent words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReservedLexicon {
    words: BTreeSet<String>,
}

impl Default for ReservedLexicon {
    fn default() -> Self {
        default_lexicon()
    }
}

impl ReservedLexicon {
    pub fn from_words<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words = BTreeSet::new();
        for entry in entries {
            let entry = entry.as_ref().trim();
            if entry.is_empty() {
                continue;
            }
            let upper = entry.to_uppercase();
            for part in upper.split_whitespace() {
                words.insert(part.to_owned());
            }
            words.insert(upper);
        }
        Self { words }
    }

    /// Load a replacement lexicon: one word per line, blank lines ignored.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_words(text.lines()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn is_reserved(&self, token_text: &str) -> bool {
        is_reserved(token_text, self)
    }
}

pub fn default_lexicon() -> ReservedLexicon {
    ReservedLexicon::from_words(RESERVED_WORDS)
}

/// True for keywords, whitespace-only tokens and pure punctuation.
pub fn is_reserved(token_text: &str, lex: &ReservedLexicon) -> bool {
    let trimmed = token_text.trim();
    if trimmed.is_empty() || trimmed.chars().all(|c| c.is_ascii_punctuation()) {
        return true;
    }
    lex.contains(&trimmed.to_uppercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_membership() {
        let lex = default_lexicon();
        assert!(lex.contains("SELECT"));
        assert!(lex.contains("BY"));
        assert!(lex.contains("GROUP BY"));
        assert!(lex.contains("KEY"));
        assert!(lex.contains("CURRENT_TIMESTAMP"));
        assert!(!lex.contains("patients"));
        assert!(!lex.contains("PATIENTS"));
    }

    #[test]
    fn list_is_complete() {
        assert_eq!(RESERVED_WORDS.len(), 65);
        assert_eq!(RESERVED_WORDS.iter().filter(|w| **w == "INDEX").count(), 2);
        let lex = default_lexicon();
        for w in RESERVED_WORDS {
            assert!(lex.contains(w), "{w}");
        }
        // 64 distinct entries plus GROUP, BY, ORDER, PRIMARY, KEY, FOREIGN, NOT
        assert_eq!(lex.len(), 64 + 7);
    }

    #[test]
    fn normalization() {
        let lex = default_lexicon();
        assert!(is_reserved(" SELECT", &lex));
        assert!(is_reserved("count", &lex));
        assert!(is_reserved("Where\n", &lex));
        assert!(!is_reserved(" patients", &lex));
        assert!(!is_reserved("SEL", &lex));
        assert!(!is_reserved("ECT", &lex));
    }

    #[test]
    fn structure_tokens() {
        let lex = default_lexicon();
        for tok in [",", "(", ")", " ", "", "\n", " *", ");", "'", " ="] {
            assert!(is_reserved(tok, &lex), "{tok:?}");
        }
        assert!(!is_reserved("'flu'", &lex));
        assert!(!is_reserved(" 42", &lex));
        assert!(!is_reserved("t1.", &lex));
    }

    #[test]
    fn single_words_match_in_either_case() {
        let lex = default_lexicon();
        for w in RESERVED_WORDS.iter().filter(|w| !w.contains(' ')) {
            assert!(is_reserved(w, &lex));
            assert!(is_reserved(&w.to_lowercase(), &lex));
        }
    }

    #[test]
    fn override_replaces_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("words.txt");
        fs::write(&path, "select\n\nlimit offset\n").unwrap();
        let lex = ReservedLexicon::from_file(&path).unwrap();
        assert!(lex.is_reserved("SELECT"));
        assert!(lex.is_reserved("offset"));
        assert!(!lex.is_reserved("FROM"));
        assert_eq!(lex.len(), 4);
    }
}
