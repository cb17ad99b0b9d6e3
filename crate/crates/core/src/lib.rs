//! Memory management and reward attribution engine for training LLM memory
//! managers.
//!
//! * [`memory`]: single-layer memory driven by INSERT/UPDATE/DELETE/SKIP.
//! * [`ops`]: manager output protocol and formatting validity.
//! * [`retrieval`]: BM25 index and top-k retrieval.
//! * [`reward`]: chunk, global, evidence-anchored, formatting and compression
//!   rewards plus GRPO group advantages.
//! * [`qa`]: chunk-level QA construction with teacher and verifier agents.
//! * [`rollout`], [`trace`], [`audit`]: the rollout harness, its trace files
//!   and trace recomputation.

pub mod agent;
pub mod audit;
pub mod memory;
pub mod metrics;
pub mod ops;
pub mod qa;
pub mod retrieval;
pub mod reward;
pub mod rollout;
pub mod trace;

pub use agent::{Agent, AgentEndpoint, AgentError, AgentRequest, Role};
pub use memory::{ApplyReport, MemoryError, MemoryItem, MemoryState, TokenCounter, WhitespaceCounter};
pub use ops::{parse_manager_output, Operation, OperationSet, ReasonCode};
pub use retrieval::{Bm25Params, RetrievalIndex, RetrievedSet};
pub use reward::{EvidenceRecord, RewardError, RewardWeights, StepRewardBreakdown};
pub use rollout::{run_rollout, Agents, ChunkStream, RolloutConfig};
pub use trace::RolloutTrace;

use sha2::{Digest, Sha256};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
