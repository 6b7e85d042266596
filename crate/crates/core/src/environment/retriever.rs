//! Retrievers: an embedded lexical index and an HTTP client for remote ones.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Passage;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("query has no searchable terms")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("retriever transport failure: {0}")]
    Transport(String),
    #[error("retriever returned an unreadable response: {0}")]
    Decode(String),
}

/// Anything that maps a query to ranked passages.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrieveError>;
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("corpus has no documents")]
    Empty,
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

/// Lowercased alphanumeric tokens; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Double-quoted phrases in a query, tokenized.
fn quoted_phrases(query: &str) -> Vec<Vec<String>> {
    query
        .split('"')
        .enumerate()
        .filter(|(i, _)| i % 2 == 1)
        .map(|(_, phrase)| tokenize(phrase))
        .filter(|tokens| !tokens.is_empty())
        .collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        if doc.doc_id.trim().is_empty() || doc.text.trim().is_empty() {
            return Err(CorpusError::Malformed { line: i + 1, message: "doc_id and text must be non-empty".into() });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn build_index(path: impl AsRef<Path>) -> Result<LexicalIndex, CorpusError> {
    LexicalIndex::from_documents(load_corpus(path)?)
}

/// BM25 parameters plus the additive boost for quoted-phrase matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankerParams {
    pub k1: f64,
    pub b: f64,
    /// A document containing a quoted query phrase gains
    /// `phrase_boost * sum(idf(term in phrase))`.
    pub phrase_boost: f64,
}

impl Default for RankerParams {
    fn default() -> Self {
        RankerParams { k1: 1.2, b: 0.75, phrase_boost: 1.0 }
    }
}

#[derive(Debug, Clone)]
struct IndexedDoc {
    doc: Document,
    title_tokens: Vec<String>,
    text_tokens: Vec<String>,
    len: usize,
}

/// In-memory inverted index with length-normalized tf-idf (BM25) scoring.
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct LexicalIndex {
    docs: Vec<IndexedDoc>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    avg_len: f64,
    params: RankerParams,
}

impl LexicalIndex {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        Self::with_params(docs, RankerParams::default())
    }

    pub fn with_params(docs: Vec<Document>, params: RankerParams) -> Result<Self, CorpusError> {
        if docs.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen = HashSet::new();
        let mut indexed = Vec::with_capacity(docs.len());
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        for (idx, doc) in docs.into_iter().enumerate() {
            if !seen.insert(doc.doc_id.clone()) {
                return Err(CorpusError::DuplicateDocId(doc.doc_id));
            }
            let title_tokens = tokenize(&doc.title);
            let text_tokens = tokenize(&doc.text);
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in title_tokens.iter().chain(&text_tokens) {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_string()).or_default().push((idx, count));
            }
            let len = title_tokens.len() + text_tokens.len();
            indexed.push(IndexedDoc { doc, title_tokens, text_tokens, len });
        }
        let avg_len = indexed.iter().map(|d| d.len as f64).sum::<f64>() / indexed.len() as f64;
        Ok(LexicalIndex { docs: indexed, postings, avg_len, params })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn params(&self) -> RankerParams {
        self.params
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.iter().map(|d| &d.doc)
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores every document with a positive score.
    pub fn score_all(&self, query: &str) -> Result<Vec<(usize, f64)>, RetrieveError> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        if terms.is_empty() {
            return Err(RetrieveError::EmptyQuery);
        }
        let RankerParams { k1, b, phrase_boost } = self.params;
        let mut scores = vec![0.0f64; self.docs.len()];
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for &(idx, tf) in list {
                let tf = f64::from(tf);
                let norm = 1.0 - b + b * self.docs[idx].len as f64 / self.avg_len;
                scores[idx] += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        for phrase in quoted_phrases(query) {
            let unique: BTreeSet<&String> = phrase.iter().collect();
            let bonus = phrase_boost * unique.iter().map(|t| self.idf(t)).sum::<f64>();
            for (idx, d) in self.docs.iter().enumerate() {
                if contains_run(&d.title_tokens, &phrase) || contains_run(&d.text_tokens, &phrase) {
                    scores[idx] += bonus;
                }
            }
        }
        Ok(scores.into_iter().enumerate().filter(|(_, s)| *s > 0.0).collect())
    }
}

impl Retriever for LexicalIndex {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrieveError> {
        if k == 0 {
            return Err(RetrieveError::InvalidK);
        }
        let mut scored = self.score_all(query)?;
        scored.sort_by(|(a, sa), (b, sb)| {
            sb.total_cmp(sa).then_with(|| self.docs[*a].doc.doc_id.cmp(&self.docs[*b].doc.doc_id))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(idx, score)| {
                let d = &self.docs[idx].doc;
                Passage::new(d.doc_id.clone(), d.title.clone(), d.text.clone(), score)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpRetrieverConfig {
    pub url: String,
    #[serde(default = "default_retriever_timeout")]
    pub timeout_secs: u64,
}

fn default_retriever_timeout() -> u64 {
    30
}

/// Client for a remote retriever: `POST {query, k}` returns `{passages: [...]}`.
pub struct HttpRetriever {
    agent: ureq::Agent,
    url: String,
}

#[derive(Serialize)]
struct RetrieveRequest<'a> {
    query: &'a str,
    k: usize,
}

#[derive(Deserialize)]
struct RetrieveResponse {
    passages: Vec<Passage>,
}

impl HttpRetriever {
    pub fn new(config: &HttpRetrieverConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpRetriever { agent, url: config.url.clone() }
    }
}

impl Retriever for HttpRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrieveError> {
        if k == 0 {
            return Err(RetrieveError::InvalidK);
        }
        if tokenize(query).is_empty() {
            return Err(RetrieveError::EmptyQuery);
        }
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(RetrieveRequest { query, k })
            .map_err(|e| RetrieveError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(RetrieveError::Transport(format!("status {status}: {body}")));
        }
        let mut parsed: RetrieveResponse =
            resp.body_mut().read_json().map_err(|e| RetrieveError::Decode(e.to_string()))?;
        parsed.passages.truncate(k);
        Ok(parsed.passages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, title: &str, text: &str) -> Document {
        Document { doc_id: id.into(), title: title.into(), text: text.into() }
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("Vivien Leigh's place-of-death, 1967!"), ["vivien", "leigh", "s", "place", "of", "death", "1967"]);
        assert!(tokenize(" ,;!? ").is_empty());
    }

    #[test]
    fn phrases() {
        assert_eq!(quoted_phrases("\"The Things\" emus \"x\""), vec![vec!["the".to_string(), "things".into()], vec!["x".into()]]);
        assert!(quoted_phrases("no quotes").is_empty());
    }

    #[test]
    fn empty_and_duplicate_corpus() {
        assert!(matches!(LexicalIndex::from_documents(vec![]), Err(CorpusError::Empty)));
        let dup = vec![doc("a", "A", "x"), doc("a", "B", "y")];
        assert!(matches!(LexicalIndex::from_documents(dup), Err(CorpusError::DuplicateDocId(id)) if id == "a"));
    }

    #[test]
    fn bounded_by_corpus_and_k() {
        let idx = LexicalIndex::from_documents(vec![doc("a", "Alpha", "shared word"), doc("b", "Beta", "shared term")]).unwrap();
        assert_eq!(idx.retrieve("shared", 3).unwrap().len(), 2);
        assert_eq!(idx.retrieve("shared", 1).unwrap().len(), 1);
        assert!(idx.retrieve("zebra", 3).unwrap().is_empty());
        assert!(matches!(idx.retrieve("  ?? ", 3), Err(RetrieveError::EmptyQuery)));
        assert!(matches!(idx.retrieve("shared", 0), Err(RetrieveError::InvalidK)));
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = LexicalIndex::from_documents(vec![doc("b", "T", "same text"), doc("a", "T", "same text")]).unwrap();
        let ids: Vec<String> = idx.retrieve("same", 2).unwrap().into_iter().map(|p| p.doc_id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn phrase_boost_prefers_exact_phrase() {
        let idx = LexicalIndex::from_documents(vec![
            doc("scattered", "Things", "they carried the things and more things"),
            doc("phrase", "Book", "the things they carried is a book"),
        ])
        .unwrap();
        let top = &idx.retrieve("\"the things they carried\"", 2).unwrap()[0];
        assert_eq!(top.doc_id, "phrase");
    }

    #[test]
    fn malformed_corpus_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "{\"doc_id\":\"a\",\"title\":\"A\",\"text\":\"x\"}\nnot json\n").unwrap();
        assert!(matches!(load_corpus(&path), Err(CorpusError::Malformed { line: 2, .. })));
        std::fs::write(&path, "\n").unwrap();
        assert!(matches!(build_index(&path), Err(CorpusError::Empty)));
    }
}
