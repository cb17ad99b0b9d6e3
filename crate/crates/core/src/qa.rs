//! Chunk-level QA construction: a teacher proposes factoid pairs per chunk,
//! a verifier must recover each answer from the chunk alone, and surviving
//! pairs are deduplicated against the instance history and capped at `K`.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentRequest, CandidatePair};
use crate::metrics::{sub_em, Metric};

/// Pairs kept per chunk.
pub const DEFAULT_QA_BUDGET: usize = 5;

#[derive(Debug, Error)]
pub enum QaError {
    #[error("QA budget K must be at least 1")]
    ZeroBudget,
    #[error("instance {0} has no chunks")]
    EmptyInstance(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset record on line {line}: {source}")]
    Record {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[serde(alias = "local", alias = "chunk-local")]
    Chunk,
    #[default]
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_chunk: Option<usize>,
}

impl QaPair {
    pub fn global(question: &str, answer: &str) -> Self {
        Self {
            question: question.to_string(),
            answer: answer.to_string(),
            scope: Scope::Global,
            metric: Metric::SubEm,
            source_chunk: None,
        }
    }

    pub fn chunk(question: &str, answer: &str, chunk: usize) -> Self {
        Self {
            scope: Scope::Chunk,
            source_chunk: Some(chunk),
            ..Self::global(question, answer)
        }
    }

    /// Dedup key: lowercased question with whitespace collapsed.
    pub fn dedup_key(&self) -> String {
        self.question
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase()
    }
}

/// Asks the teacher for candidate pairs. Agent failures and malformed
/// payloads yield no candidates and a warning.
pub fn generate_candidates(chunk_index: usize, chunk: &str, teacher: &dyn Agent) -> Vec<QaPair> {
    let request = AgentRequest::Generate {
        chunk_index,
        chunk: chunk.to_string(),
    };
    let text = match teacher.respond(&request) {
        Ok(text) => text,
        Err(err) => {
            tracing::warn!(chunk_index, error = %err, "teacher failed; chunk gets no candidates");
            return Vec::new();
        }
    };
    if text.trim().is_empty() {
        return Vec::new();
    }
    match serde_json::from_str::<Vec<CandidatePair>>(text.trim()) {
        Ok(candidates) => candidates
            .into_iter()
            .filter(|c| !c.question.trim().is_empty() && !c.answer.trim().is_empty())
            .map(|c| QaPair::chunk(&c.question, &c.answer, chunk_index))
            .collect(),
        Err(err) => {
            tracing::warn!(chunk_index, error = %err, "malformed teacher payload");
            Vec::new()
        }
    }
}

/// Verifies a pair against its chunk with the default substring matcher.
pub fn verify_pair(pair: &QaPair, chunk: &str, verifier: &dyn Agent) -> bool {
    verify_pair_with(pair, chunk, verifier, &|predicted, gold| sub_em(predicted, gold) == 1.0)
}

pub fn verify_pair_with(
    pair: &QaPair,
    chunk: &str,
    verifier: &dyn Agent,
    matcher: &dyn Fn(&str, &str) -> bool,
) -> bool {
    let request = AgentRequest::Verify {
        question: pair.question.clone(),
        chunk: chunk.to_string(),
    };
    match verifier.respond(&request) {
        Ok(predicted) => matcher(&predicted, &pair.answer),
        Err(err) => {
            tracing::warn!(question = %pair.question, error = %err, "verifier failed; pair discarded");
            false
        }
    }
}

/// Drops pairs whose question is already in `history` (or repeated within
/// `verified`), keeps the first `k` in teacher order and records them.
pub fn dedup_select(verified: Vec<QaPair>, history: &mut HashSet<String>, k: usize) -> Vec<QaPair> {
    let mut selected = Vec::new();
    for pair in verified {
        if selected.len() == k {
            break;
        }
        if history.insert(pair.dedup_key()) {
            selected.push(pair);
        }
    }
    selected
}

/// Builds the per-chunk QA sets of one instance. Chunks are processed in
/// order because the dedup history is order dependent.
pub fn build_dataset<S: AsRef<str>>(
    instance_id: &str,
    chunks: &[S],
    teacher: &dyn Agent,
    verifier: &dyn Agent,
    k: usize,
) -> Result<Vec<Vec<QaPair>>, QaError> {
    if k == 0 {
        return Err(QaError::ZeroBudget);
    }
    if chunks.is_empty() {
        return Err(QaError::EmptyInstance(instance_id.to_string()));
    }
    let mut history = HashSet::new();
    let mut out = Vec::with_capacity(chunks.len());
    for (t, chunk) in chunks.iter().enumerate() {
        let chunk = chunk.as_ref();
        let verified: Vec<QaPair> = generate_candidates(t, chunk, teacher)
            .into_iter()
            .filter(|pair| verify_pair(pair, chunk, verifier))
            .collect();
        out.push(dedup_select(verified, &mut history, k));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub instance_id: String,
    pub chunk_index: usize,
    pub question: String,
    pub answer: String,
    pub metric: Metric,
    pub scope: Scope,
}

pub fn dataset_records(instance_id: &str, per_chunk: &[Vec<QaPair>]) -> Vec<DatasetRecord> {
    per_chunk
        .iter()
        .enumerate()
        .flat_map(|(t, pairs)| {
            pairs.iter().map(move |p| DatasetRecord {
                instance_id: instance_id.to_string(),
                chunk_index: t,
                question: p.question.clone(),
                answer: p.answer.clone(),
                metric: p.metric,
                scope: p.scope,
            })
        })
        .collect()
}

pub fn write_dataset<W: Write>(mut out: W, records: &[DatasetRecord]) -> Result<(), QaError> {
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>, QaError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| QaError::Record { line: i + 1, source })?,
        );
    }
    Ok(records)
}
