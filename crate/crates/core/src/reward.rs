//! Reward components and group-relative advantages.
//!
//! Per-step reward:
//!
//! ```text
//! r_t = r_eara(t) + r_fmt(t) + w1 * r_chunk(t) + w2 * r_comp
//! ```
//!
//! `r_eara` redistributes the rollout-level global QA reward over the steps:
//! a uniform share `(1 - beta) * r_global / T` plus `beta * N_t`, where the
//! normalized evidence contribution `N_t` splits every question's score
//! evenly over the memory items retrieved to answer it and credits each share
//! to the step that last wrote the item. Because the shares of one question
//! sum to `s_j / n`, `Σ_t N_t = r_global` and the step rewards conserve the
//! global reward exactly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_W1: f64 = 0.5;
pub const DEFAULT_W2: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-8;
/// Tolerance of the conservation identity.
pub const CONSERVATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("global reward needs at least one question score")]
    NoGlobalQuestions,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("rollout must have at least one step")]
    NoSteps,
    #[error("question {question}: item credited to step {step} but rollout has {steps} steps")]
    OriginStepOutOfRange {
        question: usize,
        step: usize,
        steps: usize,
    },
    #[error("question {question}: {items} retrieved ids but {steps} origin steps")]
    EvidenceShape {
        question: usize,
        items: usize,
        steps: usize,
    },
    #[error("component vectors differ in length: eara={eara}, fmt={fmt}, chunk={chunk}")]
    LengthMismatch { eara: usize, fmt: usize, chunk: usize },
    #[error("advantage group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("total input length must be positive")]
    EmptyInput,
    #[error("invalid weight {name}={value}: {why}")]
    BadWeight {
        name: &'static str,
        value: f64,
        why: &'static str,
    },
}

/// Enables or disables individual reward components (for ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentFlags {
    pub eara: bool,
    pub fmt: bool,
    pub chunk: bool,
    pub comp: bool,
}

impl Default for ComponentFlags {
    fn default() -> Self {
        Self {
            eara: true,
            fmt: true,
            chunk: true,
            comp: true,
        }
    }
}

/// Fields missing from a serialized form take their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub components: ComponentFlags,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: DEFAULT_W1,
            w2: DEFAULT_W2,
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
            components: ComponentFlags::default(),
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, value) in [("w1", self.w1), ("w2", self.w2), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(RewardError::BadWeight {
                    name,
                    value,
                    why: "must lie in [0, 1]",
                });
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(RewardError::BadWeight {
                name: "epsilon",
                value: self.epsilon,
                why: "must be a small positive number",
            });
        }
        Ok(())
    }

    /// Parses `w1=0.5,w2=0.05,beta=0.5[,epsilon=1e-8]`; unspecified keys keep defaults.
    pub fn parse_assignments(text: &str) -> Result<Self, String> {
        let mut weights = Self::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|e| format!("bad value for {key}: {e}"))?;
            match key.trim() {
                "w1" => weights.w1 = value,
                "w2" => weights.w2 = value,
                "beta" => weights.beta = value,
                "epsilon" | "eps" => weights.epsilon = value,
                other => return Err(format!("unknown weight `{other}`")),
            }
        }
        weights.validate().map_err(|e| e.to_string())?;
        Ok(weights)
    }
}

/// Evidence behind one global question: its score and the items retrieved
/// to answer it, with the step each item was last written at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub question_index: usize,
    pub score: f64,
    pub retrieved_item_ids: Vec<u64>,
    pub origin_steps: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRewardBreakdown {
    pub step: usize,
    pub r_eara: f64,
    pub r_fmt: f64,
    pub r_chunk: f64,
    pub r_comp: f64,
    pub total: f64,
}

fn check_score(score: f64) -> Result<f64, RewardError> {
    if (0.0..=1.0).contains(&score) {
        Ok(score)
    } else {
        Err(RewardError::ScoreOutOfRange(score))
    }
}

fn mean(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// r_chunk: mean score over the chunk's QA pairs, 0 when there are none.
pub fn chunk_step_reward(scores: &[f64]) -> Result<f64, RewardError> {
    if scores.is_empty() {
        return Ok(0.0);
    }
    for &s in scores {
        check_score(s)?;
    }
    Ok(mean(scores))
}

/// r_global: mean score over the global QA set.
pub fn global_reward(scores: &[f64]) -> Result<f64, RewardError> {
    if scores.is_empty() {
        return Err(RewardError::NoGlobalQuestions);
    }
    for &s in scores {
        check_score(s)?;
    }
    Ok(mean(scores))
}

/// Normalized evidence contribution `N_t` for `steps` steps.
///
/// Retrieved ids are deduplicated per question before splitting. A question
/// with no retrieved items has its `s_j / n` spread uniformly over all steps,
/// so `Σ_t N_t = (1/n) Σ_j s_j` holds unconditionally.
pub fn compute_nec(records: &[EvidenceRecord], steps: usize) -> Result<Vec<f64>, RewardError> {
    if steps == 0 {
        return Err(RewardError::NoSteps);
    }
    let mut nec = vec![0.0; steps];
    if records.is_empty() {
        return Ok(nec);
    }
    let n = records.len() as f64;
    let mut orphaned = 0.0;
    for (j, record) in records.iter().enumerate() {
        check_score(record.score)?;
        if record.retrieved_item_ids.len() != record.origin_steps.len() {
            return Err(RewardError::EvidenceShape {
                question: j,
                items: record.retrieved_item_ids.len(),
                steps: record.origin_steps.len(),
            });
        }
        let mut seen = BTreeSet::new();
        let mut evidence = Vec::with_capacity(record.origin_steps.len());
        for (&id, &step) in record.retrieved_item_ids.iter().zip(&record.origin_steps) {
            if step >= steps {
                return Err(RewardError::OriginStepOutOfRange {
                    question: j,
                    step,
                    steps,
                });
            }
            if seen.insert(id) {
                evidence.push(step);
            }
        }
        if evidence.is_empty() {
            orphaned += record.score / n;
            continue;
        }
        let share = record.score / (evidence.len() as f64 * n);
        for step in evidence {
            nec[step] += share;
        }
    }
    if orphaned > 0.0 {
        let spread = orphaned / steps as f64;
        for value in &mut nec {
            *value += spread;
        }
    }
    Ok(nec)
}

/// Per-step EARA reward `(1 - beta) * r_global / T + beta * N_t`.
pub fn compute_eara(nec: &[f64], r_global: f64, beta: f64) -> Result<Vec<f64>, RewardError> {
    if nec.is_empty() {
        return Err(RewardError::NoSteps);
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(RewardError::BadWeight {
            name: "beta",
            value: beta,
            why: "must lie in [0, 1]",
        });
    }
    let uniform = r_global / nec.len() as f64;
    Ok(nec
        .iter()
        .map(|&n_t| (1.0 - beta) * uniform + beta * n_t)
        .collect())
}

/// True when the step rewards sum to `r_global` within [`CONSERVATION_TOLERANCE`].
pub fn is_conserved(step_rewards: &[f64], r_global: f64) -> bool {
    (step_rewards.iter().sum::<f64>() - r_global).abs() <= CONSERVATION_TOLERANCE
}

/// r_comp = 1 - L(ℳ_T) / Σ L(c_t), clamped into [0, 1].
pub fn compression_reward(mem_len_final: usize, chunk_len_total: usize) -> Result<f64, RewardError> {
    if chunk_len_total == 0 {
        return Err(RewardError::EmptyInput);
    }
    let raw = 1.0 - mem_len_final as f64 / chunk_len_total as f64;
    Ok(raw.clamp(0.0, 1.0))
}

/// Composes the per-step totals. Disabled components are zeroed in the
/// breakdown itself so `total` always equals the composition of its fields.
pub fn total_step_rewards(
    eara: &[f64],
    fmt: &[f64],
    chunk: &[f64],
    r_comp: f64,
    weights: &RewardWeights,
) -> Result<Vec<StepRewardBreakdown>, RewardError> {
    if eara.len() != fmt.len() || eara.len() != chunk.len() {
        return Err(RewardError::LengthMismatch {
            eara: eara.len(),
            fmt: fmt.len(),
            chunk: chunk.len(),
        });
    }
    let flags = weights.components;
    let gate = |on: bool, v: f64| if on { v } else { 0.0 };
    Ok((0..eara.len())
        .map(|t| {
            let r_eara = gate(flags.eara, eara[t]);
            let r_fmt = gate(flags.fmt, fmt[t]);
            let r_chunk = gate(flags.chunk, chunk[t]);
            let r_comp = gate(flags.comp, r_comp);
            StepRewardBreakdown {
                step: t,
                r_eara,
                r_fmt,
                r_chunk,
                r_comp,
                total: r_eara + r_fmt + weights.w1 * r_chunk + weights.w2 * r_comp,
            }
        })
        .collect())
}

/// Group-relative advantages `(r - mean) / (std + epsilon)` with the
/// population standard deviation. A group of identical rewards yields zeros.
pub fn grpo_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(RewardError::BadEpsilon(epsilon));
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let g = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / g;
    // second pass removes the rounding left in the first mean
    let mu = mu + rewards.iter().map(|&r| r - mu).sum::<f64>() / g;
    let var = rewards.iter().map(|&r| (r - mu) * (r - mu)).sum::<f64>() / g;
    let denom = var.sqrt() + epsilon;
    Ok(rewards.iter().map(|&r| (r - mu) / denom).collect())
}
