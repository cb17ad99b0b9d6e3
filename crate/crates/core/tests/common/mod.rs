//! Independent reference implementations shared by the integration tests.
//! None of these call into the engine's own arithmetic.

#![allow(dead_code)]

use std::collections::BTreeMap;

use finemem_core::memory::MemoryItem;
use finemem_core::ops::Operation;
use finemem_core::reward::EvidenceRecord;
use finemem_core::rollout::ChunkStream;
use finemem_core::qa::QaPair;
use rand::Rng;

/// NEC by direct enumeration of every (question, item) term.
pub fn nec_oracle(records: &[EvidenceRecord], steps: usize) -> Vec<f64> {
    let n = records.len() as f64;
    let mut nec = vec![0.0; steps];
    if records.is_empty() {
        return nec;
    }
    for record in records {
        let mut distinct: Vec<(u64, usize)> = Vec::new();
        for (id, step) in record.retrieved_item_ids.iter().zip(&record.origin_steps) {
            if !distinct.iter().any(|(seen, _)| seen == id) {
                distinct.push((*id, *step));
            }
        }
        if distinct.is_empty() {
            for value in nec.iter_mut() {
                *value += record.score / n / steps as f64;
            }
            continue;
        }
        for (_, step) in &distinct {
            nec[*step] += record.score / (distinct.len() as f64 * n);
        }
    }
    nec
}

/// Random evidence for `n` questions over `steps` steps, every M_j non-empty.
pub fn random_evidence<R: Rng>(rng: &mut R, steps: usize, n: usize) -> Vec<EvidenceRecord> {
    (0..n)
        .map(|j| {
            let m = rng.gen_range(1..=8);
            let ids: Vec<u64> = (0..m).map(|_| rng.gen_range(0..64)).collect();
            // an item has a single origin step, so derive it from the id
            let origin = ids.iter().map(|&id| (id as usize * 7) % steps).collect();
            EvidenceRecord {
                question_index: j,
                score: rng.gen_range(0.0..=1.0),
                retrieved_item_ids: ids,
                origin_steps: origin,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Write { id: u64, step: usize, content: String },
    Erase { id: u64 },
}

/// Memory as an append-only event log; state is folded from the log on demand.
#[derive(Debug, Default)]
pub struct EventLogMemory {
    log: Vec<Event>,
    inserts: u64,
}

impl EventLogMemory {
    fn live(&self, id: u64) -> bool {
        let mut alive = false;
        for event in &self.log {
            match event {
                Event::Write { id: i, .. } if *i == id => alive = true,
                Event::Erase { id: i } if *i == id => alive = false,
                _ => {}
            }
        }
        alive
    }

    pub fn apply(&mut self, op: &Operation, step: usize) {
        match op {
            Operation::Insert { content } if !content.trim().is_empty() => {
                self.log.push(Event::Write {
                    id: self.inserts,
                    step,
                    content: content.clone(),
                });
                self.inserts += 1;
            }
            Operation::Update { id, content } if !content.trim().is_empty() && self.live(*id) => {
                self.log.push(Event::Write {
                    id: *id,
                    step,
                    content: content.clone(),
                });
            }
            Operation::Delete { id } if self.live(*id) => self.log.push(Event::Erase { id: *id }),
            _ => {}
        }
    }

    pub fn fold(&self) -> BTreeMap<u64, MemoryItem> {
        let mut items = BTreeMap::new();
        for event in &self.log {
            match event {
                Event::Write { id, step, content } => {
                    items.insert(
                        *id,
                        MemoryItem {
                            id: *id,
                            content: content.clone(),
                            step: *step,
                        },
                    );
                }
                Event::Erase { id } => {
                    items.remove(id);
                }
            }
        }
        items
    }

    /// φ: last write step of every live item.
    pub fn origin_map(&self) -> BTreeMap<u64, usize> {
        let mut phi = BTreeMap::new();
        for event in &self.log {
            match event {
                Event::Write { id, step, .. } => {
                    phi.insert(*id, *step);
                }
                Event::Erase { id } => {
                    phi.remove(id);
                }
            }
        }
        phi
    }

    pub fn next_id(&self) -> u64 {
        self.inserts
    }
}

/// Random operation drawn against an id range slightly larger than the ids
/// handed out so far, so unknown targets and empty content both occur.
pub fn random_operation<R: Rng>(rng: &mut R, issued: u64) -> Operation {
    let id = rng.gen_range(0..issued + 2);
    let content = match rng.gen_range(0..10) {
        0 => "  ".to_string(),
        _ => format!("fact {}", rng.gen_range(0..1000)),
    };
    match rng.gen_range(0..10) {
        0..=3 => Operation::Insert { content },
        4..=5 => Operation::Update { id, content },
        6..=7 => Operation::Delete { id },
        _ => Operation::Skip,
    }
}

/// BM25 straight from the Okapi formula over raw token lists.
pub fn bm25_oracle(docs: &[Vec<String>], query: &[String], doc: usize, k1: f64, b: f64) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let dl = docs[doc].len() as f64;
    let mut score = 0.0;
    for term in query {
        let tf = docs[doc].iter().filter(|t| *t == term).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
    }
    score
}

pub const VOCABULARY: [&str; 24] = [
    "alice", "bob", "carol", "acme", "oslo", "paris", "river", "bridge", "blue", "red", "barn",
    "founded", "moved", "painted", "city", "north", "south", "1999", "2004", "tower", "garden",
    "market", "the", "a",
];

pub fn random_text<R: Rng>(rng: &mut R, max_words: usize) -> String {
    let len = rng.gen_range(1..=max_words);
    (0..len)
        .map(|_| {
            // skewed draw so a few terms dominate and ties are common
            let i = rng.gen_range(0..VOCABULARY.len()).min(rng.gen_range(0..VOCABULARY.len()));
            VOCABULARY[i]
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn three_chunk_stream() -> ChunkStream {
    ChunkStream {
        instance_id: "golden".into(),
        chunks: vec![
            "Alice founded Acme in 1999.".into(),
            "Bob moved to Oslo in 2004.".into(),
            "Carol painted the blue barn.".into(),
        ],
        chunk_qa: vec![
            vec![QaPair::chunk("Who founded Acme?", "Alice", 0)],
            vec![QaPair::chunk("Where did Bob move?", "Oslo", 1)],
            vec![],
        ],
        global_qa: vec![
            QaPair::global("When was Acme founded by Alice?", "1999"),
            QaPair::global("Which city did Bob move to?", "Oslo"),
        ],
    }
    .validate()
    .unwrap()
}

/// Hand-worked expectations for the verbatim manager on [`three_chunk_stream`]:
/// each chunk becomes one item; question 1 retrieves only item 0 (shares
/// "alice", "acme", "founded") and question 2 only item 1 (shares "bob",
/// "to"). Both answers appear in the retrieved text, so s = [1, 1] and
/// N = [1/2, 1/2, 0]. With beta = 1/2 the EARA vector is
/// 1/2 * 1/3 + 1/2 * N = [5/12, 5/12, 1/6]. Memory holds exactly the chunk
/// text, so r_comp = 1 - 16/16 = 0.
pub mod golden {
    pub const R_GLOBAL: f64 = 1.0;
    pub const R_COMP: f64 = 0.0;
    pub const NEC: [f64; 3] = [0.5, 0.5, 0.0];
    pub const EARA: [f64; 3] = [5.0 / 12.0, 5.0 / 12.0, 1.0 / 6.0];
    pub const CHUNK: [f64; 3] = [1.0, 1.0, 0.0];
}
