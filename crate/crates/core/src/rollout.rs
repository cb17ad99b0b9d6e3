//! Rollout harness.
//!
//! For each chunk `c_t` the manager sees the chunk and the rendered memory
//! ℳ_{t-1}, emits an operation set, and the state transitions to ℳ_t. The
//! chunk's own QA pairs are then answered by the reasoner from retrieval over
//! ℳ_t. After the last chunk every global question is answered from
//! `Retrieve(q_j, ℳ_T)`; the retrieved items and the answer score form the
//! evidence that EARA credits back to the steps.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentEndpoint, AgentError, AgentRequest, Role};
use crate::memory::{MemoryError, MemoryState, TokenCounter, WhitespaceCounter};
use crate::metrics::{score_answer, ScoreOutcome};
use crate::ops::parse_manager_output;
use crate::qa::{QaPair, Scope};
use crate::retrieval::{rag_top_k_chunks, Bm25Params, RetrievalIndex, DEFAULT_RETRIEVAL_K};
use crate::reward::{
    chunk_step_reward, compression_reward, compute_eara, compute_nec, global_reward,
    grpo_advantages, total_step_rewards, EvidenceRecord, RewardError, RewardWeights,
    StepRewardBreakdown,
};
use crate::trace::{RolloutTrace, StepRecord};

/// Rollouts per GRPO group.
pub const DEFAULT_GROUP_SIZE: usize = 8;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid chunk stream: {0}")]
    InvalidStream(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("stream file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("group rollout {0} did not complete")]
    IncompleteGroup(usize),
}

/// 𝒞 = c_1..c_T with the chunk-level and global QA sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkStream {
    pub instance_id: String,
    pub chunks: Vec<String>,
    #[serde(default)]
    pub chunk_qa: Vec<Vec<QaPair>>,
    #[serde(default)]
    pub global_qa: Vec<QaPair>,
}

impl ChunkStream {
    /// Checks the stream shape and normalizes QA scopes. A missing `chunk_qa`
    /// becomes one empty list per chunk.
    pub fn validate(mut self) -> Result<Self, RolloutError> {
        if self.chunks.is_empty() {
            return Err(RolloutError::InvalidStream(format!(
                "instance {} has no chunks",
                self.instance_id
            )));
        }
        if self.chunk_qa.is_empty() {
            self.chunk_qa = vec![Vec::new(); self.chunks.len()];
        }
        if self.chunk_qa.len() != self.chunks.len() {
            return Err(RolloutError::InvalidStream(format!(
                "instance {}: {} chunks but {} chunk_qa lists",
                self.instance_id,
                self.chunks.len(),
                self.chunk_qa.len()
            )));
        }
        for (t, pairs) in self.chunk_qa.iter_mut().enumerate() {
            for pair in pairs {
                pair.scope = Scope::Chunk;
                pair.source_chunk = Some(t);
            }
        }
        for pair in &mut self.global_qa {
            pair.scope = Scope::Global;
            pair.source_chunk = None;
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Reads instances from a file holding JSON objects one after another
/// (newline-delimited or pretty-printed) or JSON arrays of them.
pub fn read_streams(path: &Path) -> Result<Vec<ChunkStream>, RolloutError> {
    parse_streams(&fs::read_to_string(path)?)
}

pub fn parse_streams(text: &str) -> Result<Vec<ChunkStream>, RolloutError> {
    let mut streams = Vec::new();
    for value in serde_json::Deserializer::from_str(text).into_iter::<serde_json::Value>() {
        match value? {
            serde_json::Value::Array(items) => {
                for item in items {
                    streams.push(serde_json::from_value::<ChunkStream>(item)?.validate()?);
                }
            }
            other => streams.push(serde_json::from_value::<ChunkStream>(other)?.validate()?),
        }
    }
    Ok(streams)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Items retrieved per question.
    pub retrieval_k: usize,
    pub bm25: Bm25Params,
    /// Answer chunk QA from the whole of ℳ_t instead of top-k retrieval.
    pub chunk_qa_full_memory: bool,
    /// Fraction of global QA pairs evaluated per rollout (at least one).
    pub global_qa_frac: f64,
    pub seed: u64,
    /// Concurrent reasoner calls within one step's QA set.
    pub qa_parallelism: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            retrieval_k: DEFAULT_RETRIEVAL_K,
            bm25: Bm25Params::default(),
            chunk_qa_full_memory: false,
            global_qa_frac: 1.0,
            seed: 0,
            qa_parallelism: 1,
        }
    }
}

impl RolloutConfig {
    fn validate(&self) -> Result<(), RolloutError> {
        if self.retrieval_k == 0 {
            return Err(RolloutError::Config("retrieval_k must be at least 1".into()));
        }
        if !(self.global_qa_frac > 0.0 && self.global_qa_frac <= 1.0) {
            return Err(RolloutError::Config(format!(
                "global_qa_frac must lie in (0, 1], got {}",
                self.global_qa_frac
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self, weights: &RewardWeights) -> String {
        let text = serde_json::to_string(&(self, weights)).expect("config serializes");
        crate::sha256_hex(text.as_bytes())
    }

    /// Global question indices evaluated in this rollout, ascending.
    pub fn select_global_questions(&self, n: usize) -> Vec<usize> {
        if n == 0 || self.global_qa_frac >= 1.0 {
            return (0..n).collect();
        }
        let m = ((self.global_qa_frac * n as f64).ceil() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// Agents taking part in a rollout.
pub struct Agents<'a> {
    pub manager: &'a dyn Agent,
    pub reasoner: &'a dyn Agent,
    pub judge: Option<&'a dyn Agent>,
}

struct Answered {
    retrieved: Vec<u64>,
    outcome: ScoreOutcome,
}

fn answer_questions(
    state: &MemoryState,
    pairs: &[&QaPair],
    agents: &Agents<'_>,
    config: &RolloutConfig,
    full_memory: bool,
) -> Vec<Answered> {
    let index = RetrievalIndex::build(state.items().map(|i| (i.id, i.content.as_str())), config.bm25);
    let answer_one = |pair: &QaPair| -> Answered {
        let retrieved: Vec<u64> = if full_memory {
            state.items().map(|i| i.id).collect()
        } else {
            index.retrieve_top_k(&pair.question, config.retrieval_k).keys()
        };
        let context = retrieved
            .iter()
            .filter_map(|id| state.get(*id))
            .map(|i| i.content.clone())
            .collect();
        let request = AgentRequest::Answer {
            question: pair.question.clone(),
            context,
        };
        let outcome = match agents.reasoner.respond(&request) {
            Ok(prediction) => {
                score_answer(&prediction, &pair.question, &pair.answer, pair.metric, agents.judge)
            }
            Err(err) => ScoreOutcome::fault(format!("reasoner failed: {err}")),
        };
        Answered { retrieved, outcome }
    };
    if config.qa_parallelism <= 1 || pairs.len() <= 1 {
        return pairs.iter().map(|p| answer_one(p)).collect();
    }
    let mut out = Vec::with_capacity(pairs.len());
    for batch in pairs.chunks(config.qa_parallelism) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|p| scope.spawn(|| answer_one(p)))
                .collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("QA worker panicked")));
        });
    }
    out
}

/// Reward components assembled from a rollout's raw signals.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledRewards {
    pub breakdown: Vec<StepRewardBreakdown>,
    pub nec: Vec<f64>,
    pub r_global: f64,
    pub r_comp: f64,
}

/// Composes every reward component. Incomplete rollouts have no global
/// evaluation, so their EARA and compression terms are zero.
#[allow(clippy::too_many_arguments)]
pub fn assemble_rewards(
    fmt: &[f64],
    chunk_scores: &[Vec<f64>],
    evidence: &[EvidenceRecord],
    global_scores: &[f64],
    memory_length_final: usize,
    chunk_length_total: usize,
    weights: &RewardWeights,
    incomplete: bool,
) -> Result<AssembledRewards, RewardError> {
    let steps = fmt.len();
    let chunk: Vec<f64> = chunk_scores
        .iter()
        .map(|s| chunk_step_reward(s))
        .collect::<Result<_, _>>()?;
    if incomplete || steps == 0 {
        let zeros = vec![0.0; steps];
        let breakdown = total_step_rewards(&zeros, fmt, &chunk, 0.0, weights)?;
        return Ok(AssembledRewards {
            breakdown,
            nec: zeros,
            r_global: 0.0,
            r_comp: 0.0,
        });
    }
    let r_global = global_reward(global_scores)?;
    let nec = compute_nec(evidence, steps)?;
    let eara = compute_eara(&nec, r_global, weights.beta)?;
    let r_comp = compression_reward(memory_length_final, chunk_length_total)?;
    let breakdown = total_step_rewards(&eara, fmt, &chunk, r_comp, weights)?;
    Ok(AssembledRewards {
        breakdown,
        nec,
        r_global,
        r_comp,
    })
}

/// Runs one rollout. A manager failure ends the rollout early with a trace
/// flagged incomplete; a reasoner failure scores that question 0.
pub fn run_rollout(
    stream: &ChunkStream,
    agents: &Agents<'_>,
    weights: &RewardWeights,
    config: &RolloutConfig,
) -> Result<RolloutTrace, RolloutError> {
    weights.validate()?;
    config.validate()?;
    let stream = stream.clone().validate()?;
    let counter = WhitespaceCounter;

    let mut state = MemoryState::new();
    let mut partial = Vec::with_capacity(stream.len());
    let mut fault = None;

    for (t, chunk) in stream.chunks.iter().enumerate() {
        let request = AgentRequest::Manage {
            step: t,
            chunk: chunk.clone(),
            memory: state.items().cloned().collect(),
        };
        let raw_output = match agents.manager.respond(&request) {
            Ok(text) => text,
            Err(err) => {
                tracing::warn!(instance = %stream.instance_id, step = t, error = %err, "manager failed; rollout aborted");
                fault = Some(format!("manager failed at step {t}: {err}"));
                break;
            }
        };
        let operations = parse_manager_output(&raw_output);
        let apply_report = state.apply_operation_set(&operations.parsed(), t)?;
        let r_fmt = operations.format_reward(&apply_report);
        let memory_hash = crate::sha256_hex(state.serialize_state().as_bytes());

        let pairs: Vec<&QaPair> = stream.chunk_qa[t].iter().collect();
        let chunk_scores: Vec<ScoreOutcome> = answer_questions(&state, &pairs, agents, config, config.chunk_qa_full_memory)
            .into_iter()
            .map(|a| a.outcome)
            .collect();
        partial.push((raw_output, operations, apply_report, memory_hash, chunk_scores, r_fmt));
    }

    let incomplete = fault.is_some();
    let chunk_length_total: usize = stream.chunks.iter().map(|c| counter.count(c)).sum();
    let memory_length_final = state.memory_length(&counter);

    let global_question_indices = if incomplete {
        Vec::new()
    } else {
        config.select_global_questions(stream.global_qa.len())
    };
    if !incomplete && global_question_indices.is_empty() {
        return Err(RewardError::NoGlobalQuestions.into());
    }
    let selected: Vec<&QaPair> = global_question_indices.iter().map(|&j| &stream.global_qa[j]).collect();
    let answered = answer_questions(&state, &selected, agents, config, false);
    let mut evidence = Vec::with_capacity(answered.len());
    let mut global_scores = Vec::with_capacity(answered.len());
    for (answer, &j) in answered.into_iter().zip(&global_question_indices) {
        let origin_steps = answer
            .retrieved
            .iter()
            .map(|&id| state.origin_step(id))
            .collect::<Result<_, _>>()?;
        evidence.push(EvidenceRecord {
            question_index: j,
            score: answer.outcome.score,
            retrieved_item_ids: answer.retrieved,
            origin_steps,
        });
        global_scores.push(answer.outcome);
    }

    let fmt: Vec<f64> = partial.iter().map(|p| p.5).collect();
    let chunk_scores: Vec<Vec<f64>> = partial
        .iter()
        .map(|p| p.4.iter().map(|o: &ScoreOutcome| o.score).collect())
        .collect();
    let scores: Vec<f64> = global_scores.iter().map(|o| o.score).collect();
    let rewards = assemble_rewards(
        &fmt,
        &chunk_scores,
        &evidence,
        &scores,
        memory_length_final,
        chunk_length_total,
        weights,
        incomplete,
    )?;

    let steps = partial
        .into_iter()
        .zip(rewards.breakdown)
        .zip(&rewards.nec)
        .map(|(((raw_output, operations, apply_report, memory_hash, chunk_scores, _), breakdown), &nec)| {
            StepRecord {
                raw_output,
                operations,
                apply_report,
                memory_hash,
                chunk_scores,
                rewards: breakdown,
                nec,
            }
        })
        .collect();

    Ok(RolloutTrace {
        instance_id: stream.instance_id.clone(),
        steps,
        global_question_indices,
        global_scores,
        evidence,
        r_global: rewards.r_global,
        r_comp: rewards.r_comp,
        memory_length_final,
        chunk_length_total,
        weights: *weights,
        config: config.clone(),
        config_fingerprint: config.fingerprint(weights),
        incomplete,
        fault,
    })
}

/// G rollouts of one stream and the per-step group advantages.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub traces: Vec<RolloutTrace>,
    /// `advantages[t][g]`: advantage of rollout `g` at step `t`.
    pub advantages: Vec<Vec<f64>>,
}

/// Runs `group_size` rollouts in parallel, rollout `g` using the manager
/// endpoint seeded with `seed + g`, and standardizes the step totals within
/// each step index.
pub fn run_group(
    stream: &ChunkStream,
    manager: &AgentEndpoint,
    reasoner: &dyn Agent,
    judge: Option<&dyn Agent>,
    weights: &RewardWeights,
    config: &RolloutConfig,
    group_size: usize,
) -> Result<GroupRollout, RolloutError> {
    if group_size < 2 {
        return Err(RolloutError::Config("group size must be at least 2".into()));
    }
    let managers = (0..group_size)
        .map(|g| manager.clone().with_seed(manager.seed.wrapping_add(g as u64)).connect(Role::Manager))
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<Result<RolloutTrace, RolloutError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = managers
            .iter()
            .map(|m| {
                scope.spawn(move || {
                    let agents = Agents {
                        manager: m.as_ref(),
                        reasoner,
                        judge,
                    };
                    run_rollout(stream, &agents, weights, config)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
    });
    let traces = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    if let Some(g) = traces.iter().position(|t| t.incomplete) {
        return Err(RolloutError::IncompleteGroup(g));
    }
    let steps = stream.len();
    let advantages = (0..steps)
        .map(|t| {
            let group: Vec<f64> = traces.iter().map(|tr| tr.steps[t].rewards.total).collect();
            grpo_advantages(&group, weights.epsilon)
        })
        .collect::<Result<_, _>>()?;
    Ok(GroupRollout { traces, advantages })
}

/// Retrieve-top-k-chunks baseline: answers every global question from the
/// `k` best BM25 chunks, with no memory at all.
pub fn run_rag_baseline(
    stream: &ChunkStream,
    reasoner: &dyn Agent,
    judge: Option<&dyn Agent>,
    k: usize,
) -> Vec<ScoreOutcome> {
    stream
        .global_qa
        .iter()
        .map(|pair| {
            let context = rag_top_k_chunks(&stream.chunks, &pair.question, k)
                .into_iter()
                .map(|i| stream.chunks[i].clone())
                .collect();
            let request = AgentRequest::Answer {
                question: pair.question.clone(),
                context,
            };
            match reasoner.respond(&request) {
                Ok(p) => score_answer(&p, &pair.question, &pair.answer, pair.metric, judge),
                Err(err) => ScoreOutcome::fault(format!("reasoner failed: {err}")),
            }
        })
        .collect()
}
