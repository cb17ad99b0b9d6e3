//! Recomputes every reward component of a recorded trace from its raw
//! signals and reports each field that disagrees with what was recorded.
//!
//! The replay re-parses each raw manager output, re-applies the operations
//! to a fresh memory, re-derives every evidence item's origin step from the
//! replayed final memory, and recomposes all rewards.

use std::fmt;

use serde::Serialize;

use crate::memory::{MemoryState, WhitespaceCounter};
use crate::ops::parse_manager_output;
use crate::rollout::assemble_rewards;
use crate::trace::RolloutTrace;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diff {
    pub field: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub recorded: String,
    pub recomputed: String,
}

impl fmt::Display for Diff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(t) => write!(f, "step {t} {}: recorded {} recomputed {}", self.field, self.recorded, self.recomputed),
            None => write!(f, "{}: recorded {} recomputed {}", self.field, self.recorded, self.recomputed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub instance_id: String,
    pub steps: usize,
    pub diffs: Vec<Diff>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.diffs.is_empty()
    }
}

struct Differ {
    diffs: Vec<Diff>,
}

impl Differ {
    fn check<T: PartialEq + fmt::Debug>(&mut self, field: &str, step: Option<usize>, recorded: &T, recomputed: &T) {
        if recorded != recomputed {
            self.diffs.push(Diff {
                field: field.to_string(),
                step,
                recorded: format!("{recorded:?}"),
                recomputed: format!("{recomputed:?}"),
            });
        }
    }

    // exact comparison; NaN never matches
    fn check_f64(&mut self, field: &str, step: Option<usize>, recorded: f64, recomputed: f64) {
        if recorded.to_bits() != recomputed.to_bits() {
            self.diffs.push(Diff {
                field: field.to_string(),
                step,
                recorded: format!("{recorded:?}"),
                recomputed: format!("{recomputed:?}"),
            });
        }
    }
}

pub fn audit_trace(trace: &RolloutTrace) -> AuditReport {
    let mut d = Differ { diffs: Vec::new() };
    let counter = WhitespaceCounter;

    let mut state = MemoryState::new();
    let mut fmt = Vec::with_capacity(trace.steps.len());
    for (t, step) in trace.steps.iter().enumerate() {
        let ops = parse_manager_output(&step.raw_output);
        d.check("operations", Some(t), &step.operations, &ops);
        let report = match state.apply_operation_set(&ops.parsed(), t) {
            Ok(report) => report,
            Err(err) => {
                d.check("apply", Some(t), &"ok".to_string(), &err.to_string());
                continue;
            }
        };
        d.check("apply_report", Some(t), &step.apply_report, &report);
        let hash = crate::sha256_hex(state.serialize_state().as_bytes());
        d.check("memory_hash", Some(t), &step.memory_hash, &hash);
        fmt.push(ops.format_reward(&report));
    }

    let memory_length_final = state.memory_length(&counter);
    d.check("memory_length_final", None, &trace.memory_length_final, &memory_length_final);

    let mut evidence = trace.evidence.clone();
    for record in &mut evidence {
        let replayed: Result<Vec<usize>, _> = record
            .retrieved_item_ids
            .iter()
            .map(|&id| state.origin_step(id))
            .collect();
        match replayed {
            Ok(steps) => {
                d.check(
                    &format!("evidence[{}].origin_steps", record.question_index),
                    None,
                    &record.origin_steps,
                    &steps,
                );
                record.origin_steps = steps;
            }
            Err(err) => d.check(
                &format!("evidence[{}].retrieved_item_ids", record.question_index),
                None,
                &"items present in final memory".to_string(),
                &err.to_string(),
            ),
        }
    }
    let scores: Vec<f64> = trace.global_scores.iter().map(|o| o.score).collect();
    for (record, &score) in evidence.iter().zip(&scores) {
        d.check_f64(&format!("evidence[{}].score", record.question_index), None, record.score, score);
    }
    d.check("evidence.len", None, &evidence.len(), &scores.len());

    let chunk_scores: Vec<Vec<f64>> = trace
        .steps
        .iter()
        .map(|s| s.chunk_scores.iter().map(|o| o.score).collect())
        .collect();
    if fmt.len() != trace.steps.len() {
        return AuditReport {
            instance_id: trace.instance_id.clone(),
            steps: trace.steps.len(),
            diffs: d.diffs,
        };
    }
    match assemble_rewards(
        &fmt,
        &chunk_scores,
        &evidence,
        &scores,
        memory_length_final,
        trace.chunk_length_total,
        &trace.weights,
        trace.incomplete,
    ) {
        Ok(rewards) => {
            d.check_f64("r_global", None, trace.r_global, rewards.r_global);
            d.check_f64("r_comp", None, trace.r_comp, rewards.r_comp);
            for (t, (step, (b, nec))) in trace
                .steps
                .iter()
                .zip(rewards.breakdown.iter().zip(&rewards.nec))
                .enumerate()
            {
                let r = &step.rewards;
                d.check_f64("nec", Some(t), step.nec, *nec);
                d.check_f64("r_eara", Some(t), r.r_eara, b.r_eara);
                d.check_f64("r_fmt", Some(t), r.r_fmt, b.r_fmt);
                d.check_f64("r_chunk", Some(t), r.r_chunk, b.r_chunk);
                d.check_f64("r_comp", Some(t), r.r_comp, b.r_comp);
                d.check_f64("total", Some(t), r.total, b.total);
            }
        }
        Err(err) => d.check("rewards", None, &"computable".to_string(), &err.to_string()),
    }
    d.check(
        "config_fingerprint",
        None,
        &trace.config_fingerprint,
        &trace.config.fingerprint(&trace.weights),
    );

    AuditReport {
        instance_id: trace.instance_id.clone(),
        steps: trace.steps.len(),
        diffs: d.diffs,
    }
}
