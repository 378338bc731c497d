//! Candidate chunk selection: exact cosine search, regex matching and
//! their union.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, PatientCorpus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding for chunk {document_id}#{chunk_index} has dimension {found}, expected {expected}")]
    Dimension {
        document_id: String,
        chunk_index: usize,
        expected: usize,
        found: usize,
    },
    #[error("provider returned {found} vectors for {expected} texts")]
    Count { expected: usize, found: usize },
    #[error("invalid pattern `{pattern}`: {reason}")]
    Pattern { pattern: String, reason: String },
    #[error("top_k must be at least 1")]
    ZeroK,
}

/// Maps texts to vectors of a fixed dimension. Must be deterministic.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Seeded feature hashing of lowercase character n-grams.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub seed: u64,
    pub dimension: usize,
    pub ngram: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Self {
        HashEmbedder {
            seed,
            dimension: dimension.max(1),
            ngram: 3,
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let padded: Vec<char> = std::iter::once(' ')
            .chain(text.to_lowercase().chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }))
            .chain(std::iter::once(' '))
            .collect();
        let mut buf = [0u8; 4];
        for gram in padded.windows(self.ngram.min(padded.len()).max(1)) {
            if gram.iter().all(|c| *c == ' ') {
                continue;
            }
            let mut h = FnvHasher::with_key(self.seed ^ 0xcbf2_9ce4_8422_2325);
            for c in gram {
                h.write(c.encode_utf8(&mut buf).as_bytes());
            }
            let x = h.finish();
            let sign = if x >> 63 == 0 { 1.0 } else { -1.0 };
            v[(x % self.dimension as u64) as usize] += sign;
        }
        normalize(v)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Remote provider: `{"texts":[..]}` -> `{"vectors":[[..]]}`.
pub struct HttpEmbedder {
    endpoint: String,
    dimension: usize,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpEmbedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpEmbedder")
            .field("endpoint", &self.endpoint)
            .field("dimension", &self.dimension)
            .finish()
    }
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, dimension: usize, timeout: Duration) -> Self {
        HttpEmbedder {
            endpoint: endpoint.into(),
            dimension,
            agent: ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into(),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        Ok(body.vectors)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub top_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalSource {
    Regex,
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedChunk {
    pub document_id: String,
    pub chunk_index: usize,
    pub score: f64,
    pub source: RetrievalSource,
}

impl RetrievedChunk {
    pub fn key(&self) -> (&str, usize) {
        (&self.document_id, self.chunk_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub document_id: String,
    pub chunk_index: usize,
    pub vector: Vec<f64>,
}

/// Unit-normalized embeddings of every chunk of one patient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChunkIndex {
    pub dimension: usize,
    pub entries: Vec<IndexEntry>,
}

impl ChunkIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose chunk passes `keep`, sharing vectors with `self`.
    pub fn filtered(&self, keep: impl Fn(&str, usize) -> bool) -> ChunkIndex {
        ChunkIndex {
            dimension: self.dimension,
            entries: self
                .entries
                .iter()
                .filter(|e| keep(&e.document_id, e.chunk_index))
                .cloned()
                .collect(),
        }
    }
}

pub fn build_index(corpus: &PatientCorpus, provider: &dyn EmbeddingProvider) -> Result<ChunkIndex, RetrievalError> {
    let dimension = provider.dimension();
    if corpus.chunks.is_empty() {
        return Ok(ChunkIndex {
            dimension,
            entries: Vec::new(),
        });
    }
    let texts: Vec<String> = corpus.chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = provider.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(RetrievalError::Count {
            expected: texts.len(),
            found: vectors.len(),
        });
    }
    let entries = corpus
        .chunks
        .iter()
        .zip(vectors)
        .map(|(c, v)| {
            if v.len() != dimension {
                return Err(RetrievalError::Dimension {
                    document_id: c.document_id.clone(),
                    chunk_index: c.chunk_index,
                    expected: dimension,
                    found: v.len(),
                });
            }
            Ok(IndexEntry {
                document_id: c.document_id.clone(),
                chunk_index: c.chunk_index,
                vector: normalize(v),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(ChunkIndex { dimension, entries })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn by_score_then_key(a: &RetrievedChunk, b: &RetrievedChunk) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.document_id.cmp(&b.document_id))
        .then_with(|| a.chunk_index.cmp(&b.chunk_index))
}

/// Scores a precomputed query vector against every entry.
pub fn rank_by_vector(index: &ChunkIndex, query: &[f64], top_k: usize) -> Vec<RetrievedChunk> {
    let q = normalize(query.to_vec());
    let mut scored: Vec<RetrievedChunk> = index
        .entries
        .iter()
        .map(|e| RetrievedChunk {
            document_id: e.document_id.clone(),
            chunk_index: e.chunk_index,
            score: dot(&e.vector, &q).clamp(-1.0, 1.0),
            source: RetrievalSource::Vector,
        })
        .collect();
    scored.sort_by(by_score_then_key);
    scored.truncate(top_k);
    scored
}

/// Exact top-k cosine search; ties broken by (document_id, chunk_index).
pub fn vector_retrieve(
    index: &ChunkIndex,
    provider: &dyn EmbeddingProvider,
    query: &Query,
) -> Result<Vec<RetrievedChunk>, RetrievalError> {
    if query.top_k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let q = provider
        .embed(std::slice::from_ref(&query.text))?
        .pop()
        .ok_or(RetrievalError::Count { expected: 1, found: 0 })?;
    if q.len() != index.dimension {
        return Err(RetrievalError::Provider(format!(
            "query embedding has dimension {}, expected {}",
            q.len(),
            index.dimension
        )));
    }
    Ok(rank_by_vector(index, &q, query.top_k))
}

pub fn compile_patterns(patterns: &[String]) -> Result<Vec<Regex>, RetrievalError> {
    patterns
        .iter()
        .map(|p| {
            Regex::new(p).map_err(|e| RetrievalError::Pattern {
                pattern: p.clone(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Every chunk matching at least one pattern, once, in (document_id,
/// chunk_index) order.
pub fn regex_retrieve(chunks: &[Chunk], patterns: &[String]) -> Result<Vec<RetrievedChunk>, RetrievalError> {
    let compiled = compile_patterns(patterns)?;
    let mut hits: Vec<RetrievedChunk> = chunks
        .iter()
        .filter(|c| compiled.iter().any(|r| r.is_match(&c.text)))
        .map(|c| RetrievedChunk {
            document_id: c.document_id.clone(),
            chunk_index: c.chunk_index,
            score: 1.0,
            source: RetrievalSource::Regex,
        })
        .collect();
    hits.sort_by(|a, b| a.key().cmp(&b.key()));
    hits.dedup_by(|a, b| a.key() == b.key());
    Ok(hits)
}

/// Union of regex hits and per-query vector hits, deduplicated by chunk
/// with the best score kept; regex hits first, then vector hits by score.
pub fn hybrid_retrieve(
    index: &ChunkIndex,
    provider: &dyn EmbeddingProvider,
    corpus_chunks: &[Chunk],
    queries: &[Query],
    patterns: &[String],
) -> Result<Vec<RetrievedChunk>, RetrievalError> {
    let mut best: BTreeMap<(String, usize), RetrievedChunk> = BTreeMap::new();
    let mut offer = |hit: RetrievedChunk| {
        let key = (hit.document_id.clone(), hit.chunk_index);
        match best.get_mut(&key) {
            Some(existing) => {
                if hit.source < existing.source {
                    existing.source = hit.source;
                }
                if hit.score > existing.score {
                    existing.score = hit.score;
                }
            }
            None => {
                best.insert(key, hit);
            }
        }
    };
    if !patterns.is_empty() {
        regex_retrieve(corpus_chunks, patterns)?.into_iter().for_each(&mut offer);
    }
    for q in queries {
        vector_retrieve(index, provider, q)?.into_iter().for_each(&mut offer);
    }
    let (mut regex, mut vector): (Vec<_>, Vec<_>) =
        best.into_values().partition(|h| h.source == RetrievalSource::Regex);
    regex.sort_by(|a, b| a.key().cmp(&b.key()));
    vector.sort_by(by_score_then_key);
    regex.extend(vector);
    Ok(regex)
}
