//! Python bindings. Structured results come back as plain dicts and lists.

use std::io::BufReader;

use finemem_core::agent::{AgentEndpoint, Role};
use finemem_core::audit::audit_trace;
use finemem_core::memory::{MemoryState, WhitespaceCounter};
use finemem_core::ops::parse_manager_output;
use finemem_core::retrieval::{tokenize, Bm25Params, RetrievalIndex};
use finemem_core::reward::{self, EvidenceRecord, RewardWeights};
use finemem_core::rollout::{parse_streams, run_rollout, Agents, RolloutConfig};
use finemem_core::trace::{read_traces_from, write_trace_to};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

fn value_error(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "MemoryState", module = "finemem")]
struct PyMemoryState {
    inner: MemoryState,
}

#[pymethods]
impl PyMemoryState {
    #[new]
    fn new() -> Self {
        Self {
            inner: MemoryState::new(),
        }
    }

    /// Parses raw manager output and applies it as step `step`. Returns the
    /// apply report together with the formatting reward of the output.
    fn apply<'py>(&mut self, py: Python<'py>, output: &str, step: usize) -> PyResult<Bound<'py, PyAny>> {
        let ops = parse_manager_output(output);
        let report = self.inner.apply_operation_set(&ops.parsed(), step).map_err(value_error)?;
        let r_fmt = ops.format_reward(&report);
        to_py(
            py,
            &serde_json::json!({
                "outcomes": report.outcomes,
                "applied": report.applied_count(),
                "rejected": report.rejected_count(),
                "r_fmt": r_fmt,
            }),
        )
    }

    fn items(&self) -> Vec<(u64, String, usize)> {
        self.inner.items().map(|i| (i.id, i.content.clone(), i.step)).collect()
    }

    fn origin_step(&self, item_id: u64) -> PyResult<usize> {
        self.inner.origin_step(item_id).map_err(value_error)
    }

    fn memory_length(&self) -> usize {
        self.inner.memory_length(&WhitespaceCounter)
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn serialize(&self) -> String {
        self.inner.serialize_state()
    }

    #[staticmethod]
    fn deserialize(text: &str) -> PyResult<Self> {
        MemoryState::deserialize_state(text)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    #[getter]
    fn next_id(&self) -> u64 {
        self.inner.next_id()
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.inner.step_count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("MemoryState(items={}, steps={})", self.inner.len(), self.inner.step_count())
    }
}

#[pyclass(name = "Bm25Index", module = "finemem")]
struct PyBm25Index {
    inner: RetrievalIndex,
}

#[pymethods]
impl PyBm25Index {
    #[new]
    #[pyo3(signature = (docs, k1 = 1.2, b = 0.75))]
    fn new(docs: Vec<(u64, String)>, k1: f64, b: f64) -> Self {
        Self {
            inner: RetrievalIndex::build(docs, Bm25Params { k1, b }),
        }
    }

    fn score(&self, query: &str, key: u64) -> PyResult<f64> {
        self.inner.bm25_score(&tokenize(query), key).map_err(value_error)
    }

    fn top_k(&self, query: &str, k: usize) -> Vec<(u64, f64)> {
        self.inner
            .retrieve_top_k(query, k)
            .hits
            .into_iter()
            .map(|h| (h.key, h.score))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Classification of raw manager output without touching any memory.
#[pyfunction]
fn parse<'py>(py: Python<'py>, output: &str) -> PyResult<Bound<'py, PyAny>> {
    let ops = parse_manager_output(output);
    to_py(
        py,
        &serde_json::json!({
            "entries": ops.entries,
            "valid": ops.valid_count(),
            "invalid": ops.invalid_count(),
            "validity_ratio": ops.validity_ratio(),
        }),
    )
}

fn evidence_records(evidence: Vec<(f64, Vec<u64>, Vec<usize>)>) -> Vec<EvidenceRecord> {
    evidence
        .into_iter()
        .enumerate()
        .map(|(j, (score, ids, steps))| EvidenceRecord {
            question_index: j,
            score,
            retrieved_item_ids: ids,
            origin_steps: steps,
        })
        .collect()
}

/// `evidence` holds one `(score, item_ids, origin_steps)` tuple per question.
#[pyfunction]
fn compute_nec(evidence: Vec<(f64, Vec<u64>, Vec<usize>)>, steps: usize) -> PyResult<Vec<f64>> {
    reward::compute_nec(&evidence_records(evidence), steps).map_err(value_error)
}

#[pyfunction]
#[pyo3(signature = (nec, r_global, beta = 0.5))]
fn compute_eara(nec: Vec<f64>, r_global: f64, beta: f64) -> PyResult<Vec<f64>> {
    reward::compute_eara(&nec, r_global, beta).map_err(value_error)
}

#[pyfunction]
fn compression_reward(memory_length: usize, chunk_length_total: usize) -> PyResult<f64> {
    reward::compression_reward(memory_length, chunk_length_total).map_err(value_error)
}

#[pyfunction]
#[pyo3(signature = (r_eara, r_fmt, r_chunk, r_comp, w1 = 0.5, w2 = 0.05))]
fn total_step_rewards<'py>(
    py: Python<'py>,
    r_eara: Vec<f64>,
    r_fmt: Vec<f64>,
    r_chunk: Vec<f64>,
    r_comp: f64,
    w1: f64,
    w2: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let weights = RewardWeights {
        w1,
        w2,
        ..RewardWeights::default()
    };
    weights.validate().map_err(value_error)?;
    let rows = reward::total_step_rewards(&r_eara, &r_fmt, &r_chunk, r_comp, &weights).map_err(value_error)?;
    to_py(py, &rows)
}

#[pyfunction]
#[pyo3(signature = (rewards, epsilon = 1e-8))]
fn grpo_advantages(rewards: Vec<f64>, epsilon: f64) -> PyResult<Vec<f64>> {
    reward::grpo_advantages(&rewards, epsilon).map_err(value_error)
}

/// Runs one rollout per instance in `streams` (chunk-stream JSON) and returns
/// a summary per rollout, each carrying its trace text under `"trace"`.
#[pyfunction]
#[pyo3(signature = (streams, manager = "scripted:verbatim", reasoner = "scripted:echo", weights = "", retrieval_k = 5, seed = 0, global_qa_frac = 1.0))]
#[allow(clippy::too_many_arguments)]
fn rollout<'py>(
    py: Python<'py>,
    streams: &str,
    manager: &str,
    reasoner: &str,
    weights: &str,
    retrieval_k: usize,
    seed: u64,
    global_qa_frac: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let streams = parse_streams(streams).map_err(value_error)?;
    let weights = RewardWeights::parse_assignments(weights).map_err(PyValueError::new_err)?;
    let connect = |uri: &str, role| -> PyResult<_> {
        let endpoint: AgentEndpoint = uri.parse().map_err(value_error)?;
        endpoint.with_seed(seed).connect(role).map_err(value_error)
    };
    let manager = connect(manager, Role::Manager)?;
    let reasoner = connect(reasoner, Role::Reasoner)?;
    let config = RolloutConfig {
        retrieval_k,
        seed,
        global_qa_frac,
        ..RolloutConfig::default()
    };
    let agents = Agents {
        manager: manager.as_ref(),
        reasoner: reasoner.as_ref(),
        judge: None,
    };
    let mut out = Vec::new();
    for stream in &streams {
        let trace = py
            .detach(|| run_rollout(stream, &agents, &weights, &config))
            .map_err(value_error)?;
        let mut text = Vec::new();
        write_trace_to(&mut text, &trace).map_err(value_error)?;
        out.push(serde_json::json!({
            "instance_id": trace.instance_id,
            "incomplete": trace.incomplete,
            "r_global": trace.r_global,
            "r_comp": trace.r_comp,
            "nec": trace.nec(),
            "r_eara": trace.eara(),
            "total": trace.totals(),
            "trace": String::from_utf8(text).expect("trace is UTF-8"),
        }));
    }
    to_py(py, &out)
}

/// Audits trace text and returns the differences found, one string each.
#[pyfunction]
fn audit(trace: &str) -> PyResult<Vec<String>> {
    let traces = read_traces_from(BufReader::new(trace.as_bytes())).map_err(value_error)?;
    Ok(traces
        .iter()
        .flat_map(|t| {
            let report = audit_trace(t);
            report
                .diffs
                .into_iter()
                .map(move |d| format!("{}: {d}", report.instance_id))
        })
        .collect())
}

#[pymodule]
fn finemem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMemoryState>()?;
    m.add_class::<PyBm25Index>()?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(compute_nec, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eara, m)?)?;
    m.add_function(wrap_pyfunction!(compression_reward, m)?)?;
    m.add_function(wrap_pyfunction!(total_step_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    Ok(())
}
