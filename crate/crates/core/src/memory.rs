//! Single-layer memory store.
//!
//! Every item is a `{id, content, step}` triplet. `step` is the index of the
//! chunk step that last wrote the item, which makes it the provenance map used
//! for evidence attribution. Ids are assigned by the engine, increase strictly
//! and are never reused.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{Operation, ReasonCode};

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("operation set for step {got} applied out of order (expected step {expected})")]
    Sequencing { expected: usize, got: usize },
    #[error("no memory item with id {0}")]
    UnknownItem(u64),
    #[error("malformed memory state at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub id: u64,
    pub content: String,
    pub step: usize,
}

/// Counts tokens for length-based rewards.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-delimited token counter, the default length measure.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Outcome of a single operation inside an applied set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum OpOutcome {
    Inserted { id: u64 },
    Updated { id: u64 },
    Deleted { id: u64 },
    Skipped,
    Rejected { reason: ReasonCode },
}

impl OpOutcome {
    pub fn is_rejected(&self) -> bool {
        matches!(self, OpOutcome::Rejected { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub step: usize,
    pub outcomes: Vec<OpOutcome>,
}

impl ApplyReport {
    pub fn applied_count(&self) -> usize {
        self.outcomes.iter().filter(|o| !o.is_rejected()).count()
    }

    pub fn rejected_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_rejected()).count()
    }
}

/// The memory state ℳ_t: items keyed by id, iterated in ascending id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryState {
    items: BTreeMap<u64, MemoryItem>,
    next_id: u64,
    step_count: usize,
}

impl MemoryState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = &MemoryItem> {
        self.items.values()
    }

    pub fn get(&self, id: u64) -> Option<&MemoryItem> {
        self.items.get(&id)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.items.contains_key(&id)
    }

    /// Applies the transition 𝒯(ℳ_{t-1}, P_t) in place.
    ///
    /// Operations run in listed order. A rejected operation is recorded in the
    /// report and does not abort the rest of the set.
    pub fn apply_operation_set(
        &mut self,
        ops: &[Operation],
        step: usize,
    ) -> Result<ApplyReport, MemoryError> {
        if step != self.step_count {
            return Err(MemoryError::Sequencing {
                expected: self.step_count,
                got: step,
            });
        }
        let outcomes = ops.iter().map(|op| self.apply_one(op, step)).collect();
        self.step_count += 1;
        Ok(ApplyReport { step, outcomes })
    }

    fn apply_one(&mut self, op: &Operation, step: usize) -> OpOutcome {
        match op {
            Operation::Insert { content } => {
                if content.trim().is_empty() {
                    return OpOutcome::Rejected {
                        reason: ReasonCode::EmptyContent,
                    };
                }
                let id = self.next_id;
                self.next_id += 1;
                self.items.insert(
                    id,
                    MemoryItem {
                        id,
                        content: content.clone(),
                        step,
                    },
                );
                OpOutcome::Inserted { id }
            }
            Operation::Update { id, content } => {
                if content.trim().is_empty() {
                    return OpOutcome::Rejected {
                        reason: ReasonCode::EmptyContent,
                    };
                }
                match self.items.get_mut(id) {
                    Some(item) => {
                        item.content = content.clone();
                        item.step = step;
                        OpOutcome::Updated { id: *id }
                    }
                    None => OpOutcome::Rejected {
                        reason: ReasonCode::UnknownTarget,
                    },
                }
            }
            Operation::Delete { id } => match self.items.remove(id) {
                Some(_) => OpOutcome::Deleted { id: *id },
                None => OpOutcome::Rejected {
                    reason: ReasonCode::UnknownTarget,
                },
            },
            Operation::Skip => OpOutcome::Skipped,
        }
    }

    /// φ(m): the step that last wrote the item.
    pub fn origin_step(&self, item_id: u64) -> Result<usize, MemoryError> {
        self.items
            .get(&item_id)
            .map(|item| item.step)
            .ok_or(MemoryError::UnknownItem(item_id))
    }

    /// L(ℳ): summed token length of all item contents.
    pub fn memory_length(&self, counter: &dyn TokenCounter) -> usize {
        self.items.values().map(|item| counter.count(&item.content)).sum()
    }

    /// Renders the memory as `[id] content` lines in ascending id order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for item in self.items.values() {
            out.push_str(&format!("[{}] {}\n", item.id, item.content));
        }
        out
    }

    pub fn serialize_state(&self) -> String {
        serde_json::to_string(&StateRepr::from(self)).expect("memory state is always serializable")
    }

    pub fn deserialize_state(text: &str) -> Result<Self, MemoryError> {
        let repr: StateRepr = serde_json::from_str(text).map_err(|e| MemoryError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        repr.try_into()
    }
}

impl fmt::Display for MemoryState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRepr {
    next_id: u64,
    step_count: usize,
    items: Vec<MemoryItem>,
}

impl From<&MemoryState> for StateRepr {
    fn from(state: &MemoryState) -> Self {
        Self {
            next_id: state.next_id,
            step_count: state.step_count,
            items: state.items.values().cloned().collect(),
        }
    }
}

impl TryFrom<StateRepr> for MemoryState {
    type Error = MemoryError;

    fn try_from(repr: StateRepr) -> Result<Self, MemoryError> {
        let invalid = |message: String| MemoryError::Parse {
            line: 0,
            column: 0,
            message,
        };
        let mut items = BTreeMap::new();
        for item in repr.items {
            if item.id >= repr.next_id {
                return Err(invalid(format!(
                    "item id {} is not below next_id {}",
                    item.id, repr.next_id
                )));
            }
            if item.step > repr.step_count {
                return Err(invalid(format!(
                    "item {} written at step {} beyond step_count {}",
                    item.id, item.step, repr.step_count
                )));
            }
            if items.insert(item.id, item).is_some() {
                return Err(invalid("duplicate item id".to_string()));
            }
        }
        Ok(Self {
            items,
            next_id: repr.next_id,
            step_count: repr.step_count,
        })
    }
}
