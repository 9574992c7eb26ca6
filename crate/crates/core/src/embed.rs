//! Test-source embeddings.
//!
//! A test is cut into token windows, each window is encoded by an
//! [`EmbeddingProvider`], and the window vectors are mean-pooled into one
//! fixed-dimension [`EmbeddingVector`]. Padding to a common sequence length is
//! the provider's business; this side only ever sees fixed-dim vectors.
//!
//! Vectors are persisted as JSON Lines, one `{"id": ..., "vec": [...]}` object
//! per line. Lines starting with `#` are comments.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{lex, LexError, TokenKind};
use crate::dataset::{Dataset, FlakyTest};

/// A fixed-length vector of finite `f32` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Returns `None` if any value is non-finite or the vector is empty.
    pub fn new(values: Vec<f32>) -> Option<Self> {
        (!values.is_empty() && values.iter().all(|v| v.is_finite())).then_some(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Window parameters for cutting long tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub max_tokens: usize,
    /// Tokens shared by consecutive windows; must be below `max_tokens`.
    pub overlap: usize,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            overlap: 0,
        }
    }
}

impl ChunkSpec {
    pub fn validate(&self) -> Result<(), ChunkError> {
        if self.max_tokens == 0 || self.overlap >= self.max_tokens {
            return Err(ChunkError::InvalidSpec {
                max_tokens: self.max_tokens,
                overlap: self.overlap,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("cannot chunk an empty token list")]
    Empty,
    #[error("invalid chunk spec: overlap {overlap} must be below max_tokens {max_tokens} (> 0)")]
    InvalidSpec { max_tokens: usize, overlap: usize },
}

/// Cuts `n` tokens into windows of at most `max_tokens`, consecutive windows
/// sharing `overlap` tokens. Windows cover `0..n` in order.
pub fn chunk<T>(tokens: &[T], spec: &ChunkSpec) -> Result<Vec<Range<usize>>, ChunkError> {
    spec.validate()?;
    let n = tokens.len();
    if n == 0 {
        return Err(ChunkError::Empty);
    }
    let stride = spec.max_tokens - spec.overlap;
    let mut ranges = Vec::with_capacity(n.div_ceil(stride));
    let mut start = 0;
    loop {
        let end = (start + spec.max_tokens).min(n);
        ranges.push(start..end);
        if end == n {
            return Ok(ranges);
        }
        start += stride;
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("provider returned a non-finite or empty vector")]
    NonFinite,
    #[error("status {0}")]
    Status(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("cannot tokenize test source: {0}")]
    Lex(#[from] LexError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error("test `{id}`: {source}")]
    Test {
        id: String,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("provider failure: {0}")]
    Provider(String),
}

/// Maps source text to vectors. Implementations must be deterministic.
pub trait EmbeddingProvider {
    /// Declared output dimension, if known before the first call.
    fn dim(&self) -> Option<usize>;

    /// Encodes each text, in order.
    fn encode(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

/// Window texts of a source: each chunk spans from its first to its last
/// non-whitespace token, so interior layout is kept.
pub fn chunk_texts(source: &str, spec: &ChunkSpec) -> Result<Vec<String>, EmbedError> {
    let tokens: Vec<_> = lex(source)?
        .into_iter()
        .filter(|t| t.kind != TokenKind::Whitespace)
        .collect();
    let ranges = chunk(&tokens, spec)?;
    Ok(ranges
        .into_iter()
        .map(|r| {
            let first = &tokens[r.start];
            let last = &tokens[r.end - 1];
            source[first.offset..last.offset + last.text.len()].to_string()
        })
        .collect())
}

/// Mean of equal-length vectors, accumulated in `f64`.
pub fn mean_pool(vectors: &[EmbeddingVector]) -> Option<EmbeddingVector> {
    let dim = vectors.first()?.dim();
    let mut acc = vec![0.0f64; dim];
    for v in vectors {
        if v.dim() != dim {
            return None;
        }
        for (a, x) in acc.iter_mut().zip(v.as_slice()) {
            *a += f64::from(*x);
        }
    }
    let n = vectors.len() as f64;
    EmbeddingVector::new(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Encodes one test: chunk, encode each chunk, mean-pool.
pub fn embed_test(
    test: &FlakyTest,
    provider: &dyn EmbeddingProvider,
    spec: &ChunkSpec,
) -> Result<EmbeddingVector, EmbedError> {
    let wrap = |source: EmbedError| EmbedError::Test {
        id: test.id.clone(),
        source: Box::new(source),
    };
    let texts = chunk_texts(&test.source, spec).map_err(wrap)?;
    let vectors = provider.encode(&texts).map_err(wrap)?;
    if vectors.len() != texts.len() {
        return Err(wrap(EmbedError::CountMismatch {
            expected: texts.len(),
            got: vectors.len(),
        }));
    }
    let expected = provider.dim().unwrap_or(vectors[0].dim());
    if let Some(bad) = vectors.iter().find(|v| v.dim() != expected) {
        return Err(wrap(EmbedError::DimensionMismatch {
            expected,
            got: bad.dim(),
        }));
    }
    mean_pool(&vectors).ok_or_else(|| wrap(EmbedError::NonFinite))
}

/// Embeds every test of `d` into a new store.
pub fn embed_dataset(
    d: &Dataset,
    provider: &dyn EmbeddingProvider,
    spec: &ChunkSpec,
) -> Result<EmbeddingStore, EmbedError> {
    let mut store: Option<EmbeddingStore> = None;
    for t in d.tests() {
        let v = embed_test(t, provider, spec)?;
        let s = store.get_or_insert_with(|| EmbeddingStore::new(v.dim()));
        s.insert(t.id.clone(), v).map_err(|e| EmbedError::Test {
            id: t.id.clone(),
            source: Box::new(match e {
                StoreError::RaggedDim { expected, got, .. } => {
                    EmbedError::DimensionMismatch { expected, got }
                }
                other => EmbedError::Provider(other.to_string()),
            }),
        })?;
    }
    Ok(store.unwrap_or_else(|| EmbeddingStore::new(provider.dim().unwrap_or(1))))
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: vector has dim {got}, store dim is {expected}")]
    RaggedDim {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: non-finite or empty vector")]
    NonFinite { line: usize },
    #[error("empty embedding file")]
    Empty,
}

#[derive(Serialize, Deserialize)]
struct Record<I, V> {
    id: I,
    vec: V,
}

/// Vectors keyed by test id, all of one dimension, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: IndexMap<String, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds a vector. `line` in errors is the 1-based insertion position.
    pub fn insert(&mut self, id: String, vector: EmbeddingVector) -> Result<(), StoreError> {
        let line = self.vectors.len() + 1;
        if vector.dim() != self.dim {
            return Err(StoreError::RaggedDim {
                line,
                expected: self.dim,
                got: vector.dim(),
            });
        }
        if self.vectors.contains_key(&id) {
            return Err(StoreError::DuplicateId { line, id });
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self, StoreError> {
        let mut store: Option<EmbeddingStore> = None;
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| StoreError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let record: Record<String, Vec<f32>> =
                serde_json::from_str(trimmed).map_err(|e| StoreError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let vector =
                EmbeddingVector::new(record.vec).ok_or(StoreError::NonFinite { line: line_no })?;
            let s = store.get_or_insert_with(|| EmbeddingStore::new(vector.dim()));
            s.insert(record.id, vector).map_err(|e| match e {
                StoreError::RaggedDim { expected, got, .. } => StoreError::RaggedDim {
                    line: line_no,
                    expected,
                    got,
                },
                StoreError::DuplicateId { id, .. } => StoreError::DuplicateId { line: line_no, id },
                other => other,
            })?;
        }
        store.ok_or(StoreError::Empty)
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for (id, vec) in &self.vectors {
            let record = Record { id, vec };
            serde_json::to_writer(&mut writer, &record)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        self.write_jsonl(std::io::BufWriter::new(File::create(path)?))
    }
}

/// Reads a JSON-lines embedding file.
pub fn load_store(path: &Path) -> Result<EmbeddingStore, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    EmbeddingStore::read_jsonl(file)
}

/// Requests are split into batches of at most this many texts.
pub const REMOTE_BATCH: usize = 32;

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

fn embed_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/embed") {
        base.to_string()
    } else {
        format!("{base}/embed")
    }
}

/// Client for an encoder service speaking `POST /embed`.
pub struct RemoteProvider {
    url: String,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(endpoint: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: embed_url(endpoint),
            agent,
        }
    }

    fn post(&self, batch: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts: batch })
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(EmbedError::Status(status));
        }
        let body: EmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Provider(format!("malformed response: {e}")))?;
        if body.vectors.len() != batch.len() {
            return Err(EmbedError::CountMismatch {
                expected: batch.len(),
                got: body.vectors.len(),
            });
        }
        body.vectors
            .into_iter()
            .map(|v| EmbeddingVector::new(v).ok_or(EmbedError::NonFinite))
            .collect()
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn dim(&self) -> Option<usize> {
        None
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(REMOTE_BATCH) {
            out.extend(self.post(batch)?);
        }
        if let Some(first) = out.first() {
            let dim = first.dim();
            if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
                return Err(EmbedError::DimensionMismatch {
                    expected: dim,
                    got: bad.dim(),
                });
            }
        }
        Ok(out)
    }
}

/// Encodes `texts` against the service at `endpoint`, preserving order.
/// No request is made for an empty input.
pub fn remote_embed(texts: &[String], endpoint: &str) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    RemoteProvider::new(endpoint).encode(texts)
}
