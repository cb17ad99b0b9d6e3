//! Manager output protocol.
//!
//! Wire format accepted from the memory manager:
//!
//! * the bare token `done` (surrounding whitespace ignored) is a single SKIP;
//! * otherwise a JSON array of operation calls
//!   `{"op": "insert"|"update"|"delete", "id": <u64>, "content": <string>}`,
//!   where `id` is required for update/delete and forbidden for insert, and
//!   `content` is required for insert/update and forbidden for delete. `op`
//!   is matched case-insensitively.
//!
//! Parsing never fails. Anything that does not fit the schema is recorded as
//! an invalid operation with a reason code; a blob that is not a JSON array
//! counts as exactly one invalid operation.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::memory::{ApplyReport, MemoryState};

/// The SKIP token.
pub const SKIP_TOKEN: &str = "done";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Operation {
    Insert { content: String },
    Update { id: u64, content: String },
    Delete { id: u64 },
    Skip,
}

impl Operation {
    pub fn kind(&self) -> OpKind {
        match self {
            Operation::Insert { .. } => OpKind::Insert,
            Operation::Update { .. } => OpKind::Update,
            Operation::Delete { .. } => OpKind::Delete,
            Operation::Skip => OpKind::Skip,
        }
    }

    pub fn target_id(&self) -> Option<u64> {
        match self {
            Operation::Update { id, .. } | Operation::Delete { id } => Some(*id),
            _ => None,
        }
    }

    pub fn content(&self) -> Option<&str> {
        match self {
            Operation::Insert { content } | Operation::Update { content, .. } => Some(content),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Insert,
    Update,
    Delete,
    Skip,
}

/// Machine-readable reason an operation is invalid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    UnknownTarget,
    EmptyContent,
    MissingField,
    ExtraField,
    BadOpKind,
    Unparseable,
}

impl ReasonCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::UnknownTarget => "unknown_target",
            ReasonCode::EmptyContent => "empty_content",
            ReasonCode::MissingField => "missing_field",
            ReasonCode::ExtraField => "extra_field",
            ReasonCode::BadOpKind => "bad_op_kind",
            ReasonCode::Unparseable => "unparseable",
        }
    }
}

impl fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidOperation {
    pub reason: ReasonCode,
    /// The offending element as it appeared on the wire.
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpEntry {
    Valid(Operation),
    Invalid(InvalidOperation),
}

/// P_t: one parsed batch of manager operations, in emission order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationSet {
    pub raw_text: String,
    pub entries: Vec<OpEntry>,
}

impl OperationSet {
    pub fn parsed(&self) -> Vec<Operation> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                OpEntry::Valid(op) => Some(op.clone()),
                OpEntry::Invalid(_) => None,
            })
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e, OpEntry::Valid(_)))
            .count()
    }

    pub fn invalid_count(&self) -> usize {
        self.total_count() - self.valid_count()
    }

    pub fn total_count(&self) -> usize {
        self.entries.len()
    }

    /// Syntactic validity ratio, (1/M) Σ v(p).
    pub fn validity_ratio(&self) -> f64 {
        ratio(self.valid_count(), self.total_count())
    }

    /// Validity ratio after execution: operations that parsed but were
    /// rejected against the memory state (dangling targets) also count as
    /// invalid. This is r_fmt for the step.
    pub fn format_reward(&self, report: &ApplyReport) -> f64 {
        let valid = self.valid_count().saturating_sub(report.rejected_count());
        ratio(valid, self.total_count())
    }
}

fn ratio(valid: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        valid as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidityVerdict {
    Valid,
    Invalid(ReasonCode),
}

impl ValidityVerdict {
    pub fn is_valid(self) -> bool {
        self == ValidityVerdict::Valid
    }
}

/// Parses raw manager text into an operation set. Total: never fails.
pub fn parse_manager_output(text: &str) -> OperationSet {
    let trimmed = text.trim();
    let entries = if trimmed.is_empty() {
        Vec::new()
    } else if trimmed == SKIP_TOKEN {
        vec![OpEntry::Valid(Operation::Skip)]
    } else {
        match serde_json::from_str::<Value>(trimmed) {
            Ok(Value::Array(elements)) => elements.iter().map(classify_element).collect(),
            _ => vec![OpEntry::Invalid(InvalidOperation {
                reason: ReasonCode::Unparseable,
                raw: trimmed.to_string(),
            })],
        }
    };
    OperationSet {
        raw_text: text.to_string(),
        entries,
    }
}

fn classify_element(element: &Value) -> OpEntry {
    match element_to_operation(element) {
        Ok(op) => OpEntry::Valid(op),
        Err(reason) => OpEntry::Invalid(InvalidOperation {
            reason,
            raw: element.to_string(),
        }),
    }
}

fn element_to_operation(element: &Value) -> Result<Operation, ReasonCode> {
    let obj = element.as_object().ok_or(ReasonCode::Unparseable)?;
    let kind = match obj.get("op") {
        None => return Err(ReasonCode::MissingField),
        Some(Value::String(s)) => match s.to_ascii_lowercase().as_str() {
            "insert" => OpKind::Insert,
            "update" => OpKind::Update,
            "delete" => OpKind::Delete,
            _ => return Err(ReasonCode::BadOpKind),
        },
        Some(_) => return Err(ReasonCode::BadOpKind),
    };
    let (needs_id, needs_content) = match kind {
        OpKind::Insert => (false, true),
        OpKind::Update => (true, true),
        OpKind::Delete => (true, false),
        OpKind::Skip => unreachable!("skip is only reachable through the bare token"),
    };
    let allowed = |key: &str| key == "op" || (key == "id" && needs_id) || (key == "content" && needs_content);
    if obj.keys().any(|k| !allowed(k)) {
        return Err(ReasonCode::ExtraField);
    }
    let id = if needs_id { Some(field_id(obj)?) } else { None };
    let content = if needs_content {
        Some(field_content(obj)?)
    } else {
        None
    };
    Ok(match (kind, id, content) {
        (OpKind::Insert, None, Some(content)) => Operation::Insert { content },
        (OpKind::Update, Some(id), Some(content)) => Operation::Update { id, content },
        (OpKind::Delete, Some(id), None) => Operation::Delete { id },
        _ => unreachable!(),
    })
}

// A present-but-mistyped field counts as missing: the required typed value is absent.
fn field_id(obj: &Map<String, Value>) -> Result<u64, ReasonCode> {
    obj.get("id")
        .and_then(Value::as_u64)
        .ok_or(ReasonCode::MissingField)
}

fn field_content(obj: &Map<String, Value>) -> Result<String, ReasonCode> {
    let content = obj
        .get("content")
        .and_then(Value::as_str)
        .ok_or(ReasonCode::MissingField)?;
    if content.trim().is_empty() {
        return Err(ReasonCode::EmptyContent);
    }
    Ok(content.to_string())
}

/// Checks a parsed operation against the schema and the current memory.
pub fn validate_operation(op: &Operation, state: &MemoryState) -> ValidityVerdict {
    if let Some(content) = op.content() {
        if content.trim().is_empty() {
            return ValidityVerdict::Invalid(ReasonCode::EmptyContent);
        }
    }
    match op.target_id() {
        Some(id) if !state.contains(id) => ValidityVerdict::Invalid(ReasonCode::UnknownTarget),
        _ => ValidityVerdict::Valid,
    }
}

/// Renders operations back into the wire format accepted by
/// [`parse_manager_output`]. A lone SKIP renders as `done`.
pub fn render_operations(ops: &[Operation]) -> String {
    if ops == [Operation::Skip] {
        return SKIP_TOKEN.to_string();
    }
    let values: Vec<Value> = ops
        .iter()
        .map(|op| serde_json::to_value(op).expect("operation serializes"))
        .collect();
    Value::Array(values).to_string()
}
