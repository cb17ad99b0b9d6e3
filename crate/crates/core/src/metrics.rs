//! Answer scoring: substring match, exact match, keyword recall and a
//! delegated judge.
//!
//! Text normalization for all local metrics: lowercase, drop every character
//! that is neither alphanumeric nor whitespace, collapse whitespace runs to a
//! single space and trim.

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Metric {
    #[default]
    #[serde(rename = "subem", alias = "SubEM", alias = "sub_em")]
    SubEm,
    #[serde(rename = "em", alias = "EM")]
    Em,
    #[serde(rename = "kwhit", alias = "KWHit", alias = "kw_hit")]
    KwHit,
    #[serde(rename = "judge", alias = "Judge")]
    Judge,
}

pub fn normalize(text: &str) -> String {
    crate::retrieval::tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

impl ScoreOutcome {
    fn clean(score: f64) -> Self {
        Self { score, fault: None }
    }

    pub fn fault(message: impl Into<String>) -> Self {
        Self {
            score: 0.0,
            fault: Some(message.into()),
        }
    }
}

pub fn sub_em(prediction: &str, gold: &str) -> f64 {
    let gold = normalize(gold);
    if !gold.is_empty() && normalize(prediction).contains(&gold) {
        1.0
    } else {
        0.0
    }
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize(prediction) == normalize(gold) {
        1.0
    } else {
        0.0
    }
}

/// Fraction of distinct gold keywords present among the prediction's tokens.
pub fn keyword_hit(prediction: &str, gold: &str) -> f64 {
    let predicted: std::collections::HashSet<String> =
        crate::retrieval::tokenize(prediction).into_iter().collect();
    let mut keywords = crate::retrieval::tokenize(gold);
    let mut seen = std::collections::HashSet::new();
    keywords.retain(|k| seen.insert(k.clone()));
    if keywords.is_empty() {
        return 0.0;
    }
    let hits = keywords.iter().filter(|k| predicted.contains(*k)).count();
    hits as f64 / keywords.len() as f64
}

/// Scores a prediction against a gold answer under `metric`. Judge scoring
/// calls `judge`, which must answer with a number in [0, 1]; anything else
/// scores 0 with a fault annotation.
pub fn score_answer(
    prediction: &str,
    question: &str,
    gold: &str,
    metric: Metric,
    judge: Option<&dyn Agent>,
) -> ScoreOutcome {
    match metric {
        Metric::SubEm => ScoreOutcome::clean(sub_em(prediction, gold)),
        Metric::Em => ScoreOutcome::clean(exact_match(prediction, gold)),
        Metric::KwHit => ScoreOutcome::clean(keyword_hit(prediction, gold)),
        Metric::Judge => {
            let Some(judge) = judge else {
                return ScoreOutcome::fault("judge metric requested but no judge endpoint configured");
            };
            let request = AgentRequest::Judge {
                question: question.to_string(),
                prediction: prediction.to_string(),
                gold: gold.to_string(),
            };
            match judge.respond(&request) {
                Ok(text) => match text.trim().parse::<f64>() {
                    Ok(score) if (0.0..=1.0).contains(&score) => ScoreOutcome::clean(score),
                    _ => ScoreOutcome::fault(format!("judge returned non-score `{}`", text.trim())),
                },
                Err(e) => ScoreOutcome::fault(format!("judge failed: {e}")),
            }
        }
    }
}
