//! Rollout traces and their newline-delimited file format.
//!
//! A trace file holds one or more rollouts. Each rollout is `T` step lines
//! followed by one footer line:
//!
//! ```text
//! {"kind":"step","step":0,"r_eara":..,"r_fmt":..,"r_chunk":..,"r_comp":..,"total":..,"nec":..,"raw_output":..,"operations":..,"apply_report":..,"memory_hash":..,"chunk_scores":..}
//! {"kind":"footer","instance_id":..,"steps":..,"incomplete":false,..}
//! ```
//!
//! Field order is fixed and floats use shortest round-trip formatting, so
//! reading a written trace reproduces it exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{ApplyReport, MemoryState, OpOutcome};
use crate::metrics::ScoreOutcome;
use crate::ops::{OpEntry, OperationSet};
use crate::reward::{EvidenceRecord, RewardWeights, StepRewardBreakdown};
use crate::rollout::RolloutConfig;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub raw_output: String,
    pub operations: OperationSet,
    pub apply_report: ApplyReport,
    pub memory_hash: String,
    pub chunk_scores: Vec<ScoreOutcome>,
    pub rewards: StepRewardBreakdown,
    pub nec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub instance_id: String,
    pub steps: Vec<StepRecord>,
    /// Indices into the stream's global QA list that were evaluated.
    pub global_question_indices: Vec<usize>,
    pub global_scores: Vec<ScoreOutcome>,
    pub evidence: Vec<EvidenceRecord>,
    pub r_global: f64,
    pub r_comp: f64,
    pub memory_length_final: usize,
    pub chunk_length_total: usize,
    pub weights: RewardWeights,
    pub config: RolloutConfig,
    pub config_fingerprint: String,
    pub incomplete: bool,
    pub fault: Option<String>,
}

impl RolloutTrace {
    pub fn eara(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.rewards.r_eara).collect()
    }

    pub fn nec(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.nec).collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.rewards.total).collect()
    }

    pub fn chunk_rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.rewards.r_chunk).collect()
    }

    /// Replays the recorded operation sets into a fresh memory state.
    pub fn replay_memory(&self) -> Result<MemoryState, crate::memory::MemoryError> {
        let mut state = MemoryState::new();
        for (t, step) in self.steps.iter().enumerate() {
            state.apply_operation_set(&step.operations.parsed(), t)?;
        }
        Ok(state)
    }

    /// Digest of the whole written trace, for determinism checks.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        write_trace_to(&mut buf, self).expect("writing to memory cannot fail");
        crate::sha256_hex(&buf)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceLine {
    Step(StepLine),
    Footer(Box<FooterLine>),
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    step: usize,
    r_eara: f64,
    r_fmt: f64,
    r_chunk: f64,
    r_comp: f64,
    total: f64,
    nec: f64,
    raw_output: String,
    operations: Vec<OpEntry>,
    apply_report: Vec<OpOutcome>,
    memory_hash: String,
    chunk_scores: Vec<ScoreOutcome>,
}

#[derive(Serialize, Deserialize)]
struct FooterLine {
    instance_id: String,
    steps: usize,
    incomplete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fault: Option<String>,
    r_global: f64,
    r_comp: f64,
    memory_length_final: usize,
    chunk_length_total: usize,
    global_question_indices: Vec<usize>,
    global_scores: Vec<ScoreOutcome>,
    evidence: Vec<EvidenceRecord>,
    weights: RewardWeights,
    config: RolloutConfig,
    config_fingerprint: String,
}

fn step_line(step: &StepRecord) -> StepLine {
    StepLine {
        step: step.rewards.step,
        r_eara: step.rewards.r_eara,
        r_fmt: step.rewards.r_fmt,
        r_chunk: step.rewards.r_chunk,
        r_comp: step.rewards.r_comp,
        total: step.rewards.total,
        nec: step.nec,
        raw_output: step.raw_output.clone(),
        operations: step.operations.entries.clone(),
        apply_report: step.apply_report.outcomes.clone(),
        memory_hash: step.memory_hash.clone(),
        chunk_scores: step.chunk_scores.clone(),
    }
}

fn step_record(line: StepLine) -> StepRecord {
    StepRecord {
        operations: OperationSet {
            raw_text: line.raw_output.clone(),
            entries: line.operations,
        },
        raw_output: line.raw_output,
        apply_report: ApplyReport {
            step: line.step,
            outcomes: line.apply_report,
        },
        memory_hash: line.memory_hash,
        chunk_scores: line.chunk_scores,
        rewards: StepRewardBreakdown {
            step: line.step,
            r_eara: line.r_eara,
            r_fmt: line.r_fmt,
            r_chunk: line.r_chunk,
            r_comp: line.r_comp,
            total: line.total,
        },
        nec: line.nec,
    }
}

pub fn write_trace_to<W: Write>(mut out: W, trace: &RolloutTrace) -> Result<(), TraceError> {
    let mut emit = |line: &TraceLine| -> Result<(), TraceError> {
        serde_json::to_writer(&mut out, line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    for step in &trace.steps {
        emit(&TraceLine::Step(step_line(step)))?;
    }
    emit(&TraceLine::Footer(Box::new(FooterLine {
        instance_id: trace.instance_id.clone(),
        steps: trace.steps.len(),
        incomplete: trace.incomplete,
        fault: trace.fault.clone(),
        r_global: trace.r_global,
        r_comp: trace.r_comp,
        memory_length_final: trace.memory_length_final,
        chunk_length_total: trace.chunk_length_total,
        global_question_indices: trace.global_question_indices.clone(),
        global_scores: trace.global_scores.clone(),
        evidence: trace.evidence.clone(),
        weights: trace.weights,
        config: trace.config.clone(),
        config_fingerprint: trace.config_fingerprint.clone(),
    })))
}

pub fn write_trace(path: &Path, trace: &RolloutTrace) -> Result<(), TraceError> {
    write_traces(path, std::slice::from_ref(trace))
}

pub fn write_traces(path: &Path, traces: &[RolloutTrace]) -> Result<(), TraceError> {
    let mut out = BufWriter::new(File::create(path)?);
    for trace in traces {
        write_trace_to(&mut out, trace)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_traces_from<R: BufRead>(input: R) -> Result<Vec<RolloutTrace>, TraceError> {
    let mut traces = Vec::new();
    let mut pending: Vec<StepRecord> = Vec::new();
    let mut last_line = 0;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine =
            serde_json::from_str(&line).map_err(|source| TraceError::Line { line: line_no, source })?;
        match parsed {
            TraceLine::Step(step) => {
                if step.step != pending.len() {
                    return Err(TraceError::Structure {
                        line: line_no,
                        message: format!("expected step {}, found {}", pending.len(), step.step),
                    });
                }
                pending.push(step_record(step));
            }
            TraceLine::Footer(footer) => {
                if footer.steps != pending.len() {
                    return Err(TraceError::Structure {
                        line: line_no,
                        message: format!("footer declares {} steps, read {}", footer.steps, pending.len()),
                    });
                }
                traces.push(RolloutTrace {
                    instance_id: footer.instance_id,
                    steps: std::mem::take(&mut pending),
                    global_question_indices: footer.global_question_indices,
                    global_scores: footer.global_scores,
                    evidence: footer.evidence,
                    r_global: footer.r_global,
                    r_comp: footer.r_comp,
                    memory_length_final: footer.memory_length_final,
                    chunk_length_total: footer.chunk_length_total,
                    weights: footer.weights,
                    config: footer.config,
                    config_fingerprint: footer.config_fingerprint,
                    incomplete: footer.incomplete,
                    fault: footer.fault,
                });
            }
        }
    }
    if !pending.is_empty() {
        return Err(TraceError::Structure {
            line: last_line,
            message: "trailing step lines without a footer".into(),
        });
    }
    Ok(traces)
}

pub fn read_traces(path: &Path) -> Result<Vec<RolloutTrace>, TraceError> {
    read_traces_from(BufReader::new(File::open(path)?))
}
