//! Pluggable agents: the memory manager, the reasoning agent, the QA teacher,
//! the verifier and the judge.
//!
//! Every agent answers an [`AgentRequest`] with text. Scripted agents are
//! deterministic given their seed and exist for tests and offline runs.
//! Remote agents speak a minimal HTTP contract: `POST <address>` with body
//! `{"prompt": "..."}` answered by `{"text": "..."}`.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemoryItem;
use crate::ops::{render_operations, Operation, SKIP_TOKEN};
use crate::retrieval::{Bm25Params, RetrievalIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint answered with HTTP {0}")]
    Status(u16),
    #[error("malformed endpoint reply: {0}")]
    Protocol(String),
    #[error("{0}")]
    Config(String),
}

/// What an agent is asked to do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum AgentRequest {
    /// Emit an operation set for `chunk` given the current memory.
    Manage {
        step: usize,
        chunk: String,
        memory: Vec<MemoryItem>,
    },
    /// Answer `question` from the given context passages.
    Answer { question: String, context: Vec<String> },
    /// Produce candidate QA pairs (JSON array of `{question, answer}`).
    Generate { chunk_index: usize, chunk: String },
    /// Answer `question` using only `chunk`.
    Verify { question: String, chunk: String },
    /// Score `prediction` against `gold`; reply is a number in [0, 1].
    Judge {
        question: String,
        prediction: String,
        gold: String,
    },
}

impl AgentRequest {
    /// Plain-text prompt sent to remote endpoints.
    pub fn render_prompt(&self) -> String {
        match self {
            AgentRequest::Manage { step, chunk, memory } => {
                let mut rendered = String::new();
                for item in memory {
                    rendered.push_str(&format!("[{}] {}\n", item.id, item.content));
                }
                if rendered.is_empty() {
                    rendered.push_str("(empty)\n");
                }
                format!(
                    "You maintain a single-layer memory. Step {step}.\n\n\
                     Current memory:\n{rendered}\n\
                     New chunk:\n{chunk}\n\n\
                     Reply with a JSON array of operations, each one of \
                     {{\"op\":\"insert\",\"content\":...}}, \
                     {{\"op\":\"update\",\"id\":...,\"content\":...}}, \
                     {{\"op\":\"delete\",\"id\":...}}; \
                     or reply with the single token {SKIP_TOKEN} to leave memory unchanged."
                )
            }
            AgentRequest::Answer { question, context } => {
                let mut passages = String::new();
                for passage in context {
                    passages.push_str(&format!("- {passage}\n"));
                }
                format!(
                    "Answer the question using only the memory below.\n\n\
                     Memory:\n{passages}\nQuestion: {question}\nAnswer:"
                )
            }
            AgentRequest::Generate { chunk, .. } => format!(
                "Extract concise factoid question-answer pairs from the text. \
                 Reply with a JSON array of {{\"question\":...,\"answer\":...}} objects.\n\n\
                 Text:\n{chunk}"
            ),
            AgentRequest::Verify { question, chunk } => format!(
                "Answer the question using only the text below.\n\n\
                 Text:\n{chunk}\n\nQuestion: {question}\nAnswer:"
            ),
            AgentRequest::Judge {
                question,
                prediction,
                gold,
            } => format!(
                "Question: {question}\nReference answer: {gold}\nCandidate answer: {prediction}\n\n\
                 Reply with a single number between 0 and 1 rating the candidate's correctness."
            ),
        }
    }
}

pub trait Agent: Send + Sync {
    fn respond(&self, request: &AgentRequest) -> Result<String, AgentError>;
}

impl<A: Agent + ?Sized> Agent for Box<A> {
    fn respond(&self, request: &AgentRequest) -> Result<String, AgentError> {
        (**self).respond(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Manager,
    Reasoner,
    Teacher,
    Verifier,
    Judge,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Role::Manager => "manager",
            Role::Reasoner => "reasoner",
            Role::Teacher => "teacher",
            Role::Verifier => "verifier",
            Role::Judge => "judge",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EndpointKind {
    Scripted { name: String },
    Remote { address: String },
}

/// Where an agent lives: `scripted:NAME` or an `http(s)://` URI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEndpoint {
    pub kind: EndpointKind,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub seed: u64,
}

impl AgentEndpoint {
    pub fn scripted(name: &str) -> Self {
        Self {
            kind: EndpointKind::Scripted {
                name: name.to_string(),
            },
            timeout_ms: 30_000,
            max_retries: 2,
            seed: 0,
        }
    }

    pub fn remote(address: &str) -> Self {
        Self {
            kind: EndpointKind::Remote {
                address: address.to_string(),
            },
            ..Self::scripted("")
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout_ms = timeout.as_millis() as u64;
        self
    }

    pub fn with_max_retries(mut self, retries: u32) -> Self {
        self.max_retries = retries;
        self
    }

    /// Instantiates the agent for `role`.
    pub fn connect(&self, role: Role) -> Result<Box<dyn Agent>, AgentError> {
        match &self.kind {
            EndpointKind::Remote { address } => Ok(Box::new(RemoteAgent::new(
                address,
                Duration::from_millis(self.timeout_ms),
                self.max_retries,
            ))),
            EndpointKind::Scripted { name } => scripted_agent(role, name, self.seed),
        }
    }
}

impl FromStr for AgentEndpoint {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, AgentError> {
        if let Some(name) = s.strip_prefix("scripted:") {
            if name.is_empty() {
                return Err(AgentError::Config("scripted endpoint needs a name".into()));
            }
            Ok(Self::scripted(name))
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Self::remote(s))
        } else {
            Err(AgentError::Config(format!(
                "endpoint `{s}` is neither scripted:NAME nor an http(s) URI"
            )))
        }
    }
}

fn scripted_agent(role: Role, name: &str, seed: u64) -> Result<Box<dyn Agent>, AgentError> {
    let agent: Box<dyn Agent> = match (role, name) {
        (Role::Manager, "verbatim") => Box::new(ScriptedManager::Verbatim),
        (Role::Manager, "skip") => Box::new(ScriptedManager::Skip),
        (Role::Manager, "sentences") => Box::new(ScriptedManager::Sentences),
        (Role::Manager, "rolling") => Box::new(ScriptedManager::Rolling),
        (Role::Manager, "random") => Box::new(ScriptedManager::Random { seed }),
        (Role::Reasoner, "echo") => Box::new(ScriptedReasoner::Echo),
        (Role::Reasoner, "first") => Box::new(ScriptedReasoner::First),
        (Role::Teacher, "cloze") => Box::new(ClozeTeacher { seed, paraphrase: false }),
        (Role::Teacher, "cloze-para") => Box::new(ClozeTeacher { seed, paraphrase: true }),
        (Role::Verifier, "lookup") => Box::new(ScriptedVerifier::Lookup),
        (Role::Verifier, "echo") => Box::new(ScriptedVerifier::Echo),
        (Role::Verifier, "reject") => Box::new(ScriptedVerifier::Reject),
        (Role::Judge, "subem") => Box::new(ScriptedJudge),
        _ => {
            return Err(AgentError::Config(format!(
                "no scripted {role} named `{name}`"
            )))
        }
    };
    Ok(agent)
}

fn mismatch(agent: &str, request: &AgentRequest) -> AgentError {
    AgentError::Config(format!("{agent} cannot serve request {request:?}"))
}

/// Splits text on `.`, `!` and `?`, keeping the terminator.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            let s = current.trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            current.clear();
        }
    }
    let rest = current.trim();
    if !rest.is_empty() {
        sentences.push(rest.to_string());
    }
    sentences
}

#[derive(Debug, Clone, Copy)]
pub enum ScriptedManager {
    /// INSERT each chunk as one item.
    Verbatim,
    /// Always `done`.
    Skip,
    /// INSERT each sentence of the chunk.
    Sentences,
    /// Keep a single item: INSERT the first chunk, then UPDATE it.
    Rolling,
    /// Seeded mix of verbatim inserts, skips, rolling updates and malformed output.
    Random { seed: u64 },
}

impl Agent for ScriptedManager {
    fn respond(&self, request: &AgentRequest) -> Result<String, AgentError> {
        let AgentRequest::Manage { step, chunk, memory } = request else {
            return Err(mismatch("scripted manager", request));
        };
        let chunk = chunk.trim();
        if chunk.is_empty() {
            return Ok(SKIP_TOKEN.to_string());
        }
        let insert = || Operation::Insert {
            content: chunk.to_string(),
        };
        let ops = match self {
            ScriptedManager::Verbatim => vec![insert()],
            ScriptedManager::Skip => vec![Operation::Skip],
            ScriptedManager::Sentences => split_sentences(chunk)
                .into_iter()
                .map(|content| Operation::Insert { content })
                .collect(),
            ScriptedManager::Rolling => match memory.first() {
                Some(item) => vec![Operation::Update {
                    id: item.id,
                    content: chunk.to_string(),
                }],
                None => vec![insert()],
            },
            ScriptedManager::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ *step as u64);
                match rng.gen_range(0..5) {
                    0 | 1 => vec![insert()],
                    2 => vec![Operation::Skip],
                    3 => match memory.last() {
                        Some(item) => vec![Operation::Update {
                            id: item.id,
                            content: format!("{} {}", item.content, chunk),
                        }],
                        None => vec![insert()],
                    },
                    _ => {
                        return Ok(format!(
                            "[{},{{\"op\":\"delete\"}}]",
                            serde_json::json!({"op": "insert", "content": chunk})
                        ))
                    }
                }
            }
        };
        Ok(render_operations(&ops))
    }
}

pub const UNKNOWN_ANSWER: &str = "unknown";

#[derive(Debug, Clone, Copy)]
pub enum ScriptedReasoner {
    /// Answers with every context passage joined; succeeds under substring
    /// matching exactly when some retrieved item contains the answer.
    Echo,
    /// Answers with the top-ranked passage only.
    First,
}

impl Agent for ScriptedReasoner {
    fn respond(&self, request: &AgentRequest) -> Result<String, AgentError> {
        let AgentRequest::Answer { context, .. } = request else {
            return Err(mismatch("scripted reasoner", request));
        };
        if context.is_empty() {
            return Ok(UNKNOWN_ANSWER.to_string());
        }
        Ok(match self {
            ScriptedReasoner::Echo => context.join(" | "),
            ScriptedReasoner::First => context[0].clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CandidatePair {
    pub question: String,
    pub answer: String,
}

const CLOZE_TEMPLATES: [&str; 3] = [
    "{stem} what?",
    "Fill in the blank: {stem} ___",
    "Complete the statement: {stem} ...",
];

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Teacher turning every sentence into a cloze question whose answer is the
/// sentence's last word. The seed and the sentence pick the question template.
#[derive(Debug, Clone, Copy)]
pub struct ClozeTeacher {
    pub seed: u64,
    /// Also emit a second, differently templated question per sentence.
    pub paraphrase: bool,
}

impl Agent for ClozeTeacher {
    fn respond(&self, request: &AgentRequest) -> Result<String, AgentError> {
        let AgentRequest::Generate { chunk, .. } = request else {
            return Err(mismatch("cloze teacher", request));
        };
        let mut pairs = Vec::new();
        for sentence in split_sentences(chunk) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(sentence.as_bytes()));
            let words: Vec<&str> = sentence.split_whitespace().collect();
            if words.len() < 2 {
                continue;
            }
            let answer: String = words[words.len() - 1]
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect();
            if answer.is_empty() {
                continue;
            }
            let stem = words[..words.len() - 1].join(" ");
            let first = rng.gen_range(0..CLOZE_TEMPLATES.len());
            let mut picks = vec![first];
            if self.paraphrase {
                picks.push((first + 1) % CLOZE_TEMPLATES.len());
            }
            for pick in picks {
                pairs.push(CandidatePair {
                    question: CLOZE_TEMPLATES[pick].replace("{stem}", &stem),
                    answer: answer.clone(),
                });
            }
        }
        Ok(serde_json::to_string(&pairs).expect("pairs serialize"))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ScriptedVerifier {
    /// Answers with the chunk sentence that best matches the question (BM25).
    Lookup,
    /// Answers with the whole chunk.
    Echo,
    /// Never knows.
    Reject,
}

impl Agent for ScriptedVerifier {
    fn respond(&self, request: &AgentRequest) -> Result<String, AgentError> {
        let AgentRequest::Verify { question, chunk } = request else {
            return Err(mismatch("scripted verifier", request));
        };
        Ok(match self {
            ScriptedVerifier::Echo => chunk.clone(),
            ScriptedVerifier::Reject => UNKNOWN_ANSWER.to_string(),
            ScriptedVerifier::Lookup => {
                let sentences = split_sentences(chunk);
                let index = RetrievalIndex::build(
                    sentences.iter().enumerate().map(|(i, s)| (i as u64, s.as_str())),
                    Bm25Params::default(),
                );
                match index.retrieve_top_k(question, 1).hits.first() {
                    Some(hit) => sentences[hit.key as usize].clone(),
                    None => UNKNOWN_ANSWER.to_string(),
                }
            }
        })
    }
}

/// Judge replying `1` when the gold answer appears in the prediction.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedJudge;

impl Agent for ScriptedJudge {
    fn respond(&self, request: &AgentRequest) -> Result<String, AgentError> {
        let AgentRequest::Judge { prediction, gold, .. } = request else {
            return Err(mismatch("scripted judge", request));
        };
        Ok(crate::metrics::sub_em(prediction, gold).to_string())
    }
}

#[derive(Serialize)]
struct RemotePrompt<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct RemoteReply {
    text: String,
}

/// Chat-completion style HTTP agent with bounded retries.
///
/// Transport failures and 5xx replies are retried up to `max_retries` times;
/// 4xx replies fail immediately.
pub struct RemoteAgent {
    address: String,
    max_retries: u32,
    http: ureq::Agent,
}

impl RemoteAgent {
    pub fn new(address: &str, timeout: Duration, max_retries: u32) -> Self {
        let http = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            address: address.to_string(),
            max_retries,
            http,
        }
    }

    fn attempt(&self, prompt: &str) -> Result<String, AgentError> {
        let mut response = self
            .http
            .post(&self.address)
            .send_json(RemotePrompt { prompt })
            .map_err(|e| AgentError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(AgentError::Status(status));
        }
        let reply: RemoteReply = response
            .body_mut()
            .read_json()
            .map_err(|e| AgentError::Protocol(e.to_string()))?;
        Ok(reply.text)
    }
}

impl Agent for RemoteAgent {
    fn respond(&self, request: &AgentRequest) -> Result<String, AgentError> {
        let prompt = request.render_prompt();
        let mut attempt = 0;
        loop {
            match self.attempt(&prompt) {
                Ok(text) => return Ok(text),
                Err(err) => {
                    let retryable = match &err {
                        AgentError::Transport(_) => true,
                        AgentError::Status(code) => *code >= 500,
                        _ => false,
                    };
                    if !retryable || attempt >= self.max_retries {
                        return Err(err);
                    }
                    attempt += 1;
                    tracing::warn!(address = %self.address, attempt, error = %err, "retrying agent call");
                    std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                }
            }
        }
    }
}
