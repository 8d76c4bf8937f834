//! Sentence records and page metadata, stored as JSON lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
}

/// A labelled token span `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    /// External key of the gold entity.
    pub gold: String,
    /// Added by a weak-labelling heuristic rather than an anchor link.
    #[serde(default)]
    pub weak: bool,
}

impl Mention {
    pub fn anchor(start: usize, end: usize, gold: &str) -> Self {
        Self {
            start,
            end,
            gold: gold.to_string(),
            weak: false,
        }
    }

    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.start < end && start < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: u64,
    /// External key of the entity whose page the sentence comes from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<String>,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<Mention>,
}

impl Sentence {
    pub fn new(id: u64, text: &str) -> Self {
        Self {
            id,
            page: None,
            tokens: tokenize(text),
            mentions: Vec::new(),
        }
    }

    pub fn span_text(&self, start: usize, end: usize) -> String {
        self.tokens[start..end].join(" ")
    }

    pub fn is_free(&self, start: usize, end: usize) -> bool {
        !self.mentions.iter().any(|m| m.overlaps(start, end))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Other,
}

/// Metadata for the page a group of sentences was drawn from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub page: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        Self { sentences }
    }

    pub fn mention_count(&self) -> usize {
        self.sentences.iter().map(|s| s.mentions.len()).sum()
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Ok(Self::new(read_jsonl(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, &self.sentences)
    }
}

/// Whitespace tokenisation with lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}
