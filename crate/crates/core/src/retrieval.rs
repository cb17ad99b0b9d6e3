//! Okapi BM25 retrieval over keyed documents.
//!
//! Tokenization rule, applied identically to documents and queries:
//!
//! 1. every character that is neither alphanumeric (`char::is_alphanumeric`)
//!    nor whitespace (`char::is_whitespace`) is removed;
//! 2. the remaining text is lowercased (`str::to_lowercase`);
//! 3. the result is split on runs of whitespace.
//!
//! So `"Don't stop, ACME-corp!"` tokenizes to `["dont", "stop", "acmecorp"]`.
//!
//! Scoring uses the non-negative idf `ln(1 + (N - df + 0.5) / (df + 0.5))`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
/// Default number of memory items retrieved per question.
pub const DEFAULT_RETRIEVAL_K: usize = 5;
/// Chunk depth of the retrieve-two-chunks baseline.
pub const RAG_BASELINE_K: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("document {0} is not in the index")]
    UnknownDocument(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    let kept: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    kept.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone)]
struct Document {
    key: u64,
    len: usize,
    term_freqs: HashMap<String, u32>,
}

/// Immutable BM25 index. Rebuild it when the corpus changes.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    docs: Vec<Document>,
    slots: HashMap<u64, usize>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    avg_doc_len: f64,
    params: Bm25Params,
}

impl RetrievalIndex {
    /// Builds an index. A key seen more than once keeps its last text.
    pub fn build<I, S>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = (u64, S)>,
        S: AsRef<str>,
    {
        let mut unique: BTreeMap<u64, Vec<String>> = BTreeMap::new();
        for (key, text) in docs {
            unique.insert(key, tokenize(text.as_ref()));
        }

        let mut out = Self {
            docs: Vec::with_capacity(unique.len()),
            slots: HashMap::with_capacity(unique.len()),
            postings: HashMap::new(),
            avg_doc_len: 0.0,
            params,
        };
        let mut total_len = 0usize;
        for (slot, (key, tokens)) in unique.into_iter().enumerate() {
            let mut term_freqs: HashMap<String, u32> = HashMap::new();
            for token in &tokens {
                *term_freqs.entry(token.clone()).or_default() += 1;
            }
            for (term, tf) in &term_freqs {
                out.postings.entry(term.clone()).or_default().push((slot, *tf));
            }
            total_len += tokens.len();
            out.slots.insert(key, slot);
            out.docs.push(Document {
                key,
                len: tokens.len(),
                term_freqs,
            });
        }
        if !out.docs.is_empty() {
            out.avg_doc_len = total_len as f64 / out.docs.len() as f64;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn doc_len(&self, key: u64) -> Option<usize> {
        self.slots.get(&key).map(|&slot| self.docs[slot].len)
    }

    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.docs.iter().map(|d| d.key)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, idf: f64, tf: u32, doc_len: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * (doc_len as f64 / self.avg_doc_len);
        idf * (tf * (k1 + 1.0)) / (tf + k1 * norm)
    }

    /// BM25 score of one document for already-tokenized query terms.
    pub fn bm25_score(&self, query_terms: &[String], key: u64) -> Result<f64, RetrievalError> {
        let slot = *self
            .slots
            .get(&key)
            .ok_or(RetrievalError::UnknownDocument(key))?;
        let doc = &self.docs[slot];
        let mut score = 0.0;
        for term in query_terms {
            if let Some(&tf) = doc.term_freqs.get(term) {
                score += self.term_score(self.idf(term), tf, doc.len);
            }
        }
        Ok(score)
    }

    /// Top-k positively scoring documents, ties broken by ascending key.
    pub fn retrieve_top_k(&self, query: &str, k: usize) -> RetrievedSet {
        let terms = tokenize(query);
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(slot, tf) in postings {
                *scores.entry(slot).or_insert(0.0) += self.term_score(idf, tf, self.docs[slot].len);
            }
        }
        let mut hits: Vec<Hit> = scores
            .into_iter()
            .filter(|&(_, score)| score > 0.0)
            .map(|(slot, score)| Hit {
                key: self.docs[slot].key,
                score,
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.key.cmp(&b.key)));
        hits.truncate(k);
        RetrievedSet {
            query: query.to_string(),
            hits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub key: u64,
    pub score: f64,
}

/// A ranked retrieval result M_j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub query: String,
    pub hits: Vec<Hit>,
}

impl RetrievedSet {
    pub fn keys(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.key).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Retrieve-two-chunks baseline: BM25 over raw chunks, returning chunk indices.
pub fn rag_top_k_chunks<S: AsRef<str>>(chunks: &[S], query: &str, k: usize) -> Vec<usize> {
    let index = RetrievalIndex::build(
        chunks.iter().enumerate().map(|(i, c)| (i as u64, c.as_ref())),
        Bm25Params::default(),
    );
    index
        .retrieve_top_k(query, k)
        .hits
        .into_iter()
        .map(|h| h.key as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_corpus() -> RetrievalIndex {
        RetrievalIndex::build([(0, "the cat sat"), (1, "dog ran")], Bm25Params::default())
    }

    #[test]
    fn tokenization_rule() {
        assert_eq!(tokenize("Don't stop, ACME-corp!"), vec!["dont", "stop", "acmecorp"]);
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn hand_corpus_statistics() {
        let index = hand_corpus();
        assert_eq!(index.avg_doc_len(), 2.5);
        assert_eq!(index.doc_frequency("cat"), 1);
        assert_eq!(index.doc_frequency("emu"), 0);
    }

    #[test]
    fn hand_corpus_score() {
        // idf = ln 2, tf = 1, dl = 3, avgdl = 2.5
        let expected = 2f64.ln() * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 3.0 / 2.5));
        let score = hand_corpus().bm25_score(&tokenize("cat"), 0).unwrap();
        assert!((score - expected).abs() < 1e-12);
        assert!((score - 0.6406).abs() < 1e-3);
    }

    #[test]
    fn absent_terms_score_zero() {
        let index = hand_corpus();
        assert_eq!(index.bm25_score(&tokenize("cat"), 1).unwrap(), 0.0);
        assert_eq!(index.bm25_score(&tokenize("zebra"), 0).unwrap(), 0.0);
        assert_eq!(
            index.bm25_score(&tokenize("cat"), 9),
            Err(RetrievalError::UnknownDocument(9))
        );
    }

    #[test]
    fn empty_corpus() {
        let index = RetrievalIndex::build(Vec::<(u64, &str)>::new(), Bm25Params::default());
        assert_eq!(index.avg_doc_len(), 0.0);
        assert!(index.retrieve_top_k("anything", 3).is_empty());
    }

    #[test]
    fn duplicate_keys_last_write_wins() {
        let index = RetrievalIndex::build([(4, "old text"), (4, "new words here")], Bm25Params::default());
        assert_eq!(index.len(), 1);
        assert_eq!(index.doc_len(4), Some(3));
        assert_eq!(index.doc_frequency("old"), 0);
    }

    #[test]
    fn top_k_clamps_and_orders() {
        let index = RetrievalIndex::build(
            [
                (0, "apple pie recipe"),
                (1, "banana bread"),
                (2, "apple apple cider"),
                (3, "car engine"),
                (4, "apple orchard tour guide"),
            ],
            Bm25Params::default(),
        );
        let top2 = index.retrieve_top_k("apple", 2);
        assert_eq!(top2.len(), 2);
        assert!(top2.hits[0].score >= top2.hits[1].score);
        assert_eq!(top2.keys(), vec![2, 0]);
        let all = index.retrieve_top_k("apple", 50);
        assert_eq!(all.keys(), vec![2, 0, 4]);
        assert!(index.retrieve_top_k("submarine", 5).is_empty());
    }

    #[test]
    fn ties_break_by_ascending_key() {
        let index = RetrievalIndex::build([(9, "red fox"), (3, "red fox"), (5, "blue fox")], Bm25Params::default());
        assert_eq!(index.retrieve_top_k("red", 5).keys(), vec![3, 9]);
    }

    #[test]
    fn rag_baseline_picks_two_chunks() {
        let chunks = ["Paris is in France.", "Berlin is in Germany.", "Paris hosts the Louvre in Paris."];
        assert_eq!(rag_top_k_chunks(&chunks, "paris", RAG_BASELINE_K), vec![2, 0]);
    }
}
