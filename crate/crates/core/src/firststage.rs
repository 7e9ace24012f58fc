//! First-stage retrieval: embed the query and every table independently and
//! rank the corpus by cosine similarity.

use std::collections::HashMap;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, QueryRecord};
use crate::jsonl::JsonlError;

pub const DEFAULT_DIM: usize = 1024;
pub const DEFAULT_TOP_N: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("no embedding for id `{0}`")]
    MissingId(String),
    #[error("text for `{0}` has no tokens")]
    EmptyText(String),
    #[error("embedding for `{id}` has dimension {found}, expected {expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Cosine similarity; 0 when either vector is all zeros.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            (dot / denom).clamp(-1.0, 1.0)
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// `id` is the table or query id; `text` the content to embed.
    fn embed(&self, id: &str, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// Hashed bag of tokens: each token lands in bucket `fnv1a64(token) % dim`,
/// bucket weight is the term count, and the vector is L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedProvider {
    dim: usize,
}

impl HashedProvider {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        Ok(HashedProvider { dim })
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut hasher = FnvHasher::default();
        hasher.write(token.as_bytes());
        (hasher.finish() % self.dim as u64) as usize
    }
}

impl Default for HashedProvider {
    fn default() -> Self {
        HashedProvider { dim: DEFAULT_DIM }
    }
}

impl EmbeddingProvider for HashedProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, id: &str, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText(id.to_string()));
        }
        let mut counts = vec![0f64; self.dim];
        for token in tokens {
            counts[self.bucket(token)] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        Ok(EmbeddingVector {
            values: counts.into_iter().map(|c| (c / norm) as f32).collect(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRow {
    id: String,
    values: Vec<f32>,
}

/// Precomputed vectors keyed by id, loaded from an embedding file: a header
/// line `{"dim": n}` followed by `{"id": ..., "values": [...]}` lines.
#[derive(Debug, Clone)]
pub struct FileProvider {
    dim: usize,
    vectors: HashMap<String, EmbeddingVector>,
}

impl FileProvider {
    pub fn from_vectors(
        dim: usize,
        vectors: impl IntoIterator<Item = (String, EmbeddingVector)>,
    ) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        let mut map = HashMap::new();
        for (id, v) in vectors {
            if v.dim() != dim {
                return Err(EmbedError::DimMismatch {
                    id,
                    expected: dim,
                    found: v.dim(),
                });
            }
            map.insert(id, v);
        }
        Ok(FileProvider { dim, vectors: map })
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let bad = |reason: String| EmbedError::BadFile {
            path: path.to_path_buf(),
            reason,
        };
        let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header: EmbeddingHeader = match lines.next() {
            Some(line) => {
                let line = line.map_err(|e| JsonlError::io(path, e))?;
                serde_json::from_str(&line).map_err(|e| bad(format!("header line: {e}")))?
            }
            None => return Err(bad("empty file, expected a {\"dim\": n} header".into())),
        };
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| JsonlError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: EmbeddingRow =
                serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            rows.push((row.id, EmbeddingVector { values: row.values }));
        }
        FileProvider::from_vectors(header.dim, rows)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, id: &str, _text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.vectors
            .get(id)
            .cloned()
            .ok_or_else(|| EmbedError::MissingId(id.to_string()))
    }
}

/// Writes an embedding file readable by [`FileProvider::load`].
pub fn write_embeddings<'a>(
    path: &Path,
    dim: usize,
    rows: impl IntoIterator<Item = (&'a str, &'a EmbeddingVector)>,
) -> Result<(), EmbedError> {
    let io = |e: std::io::Error| EmbedError::from(JsonlError::io(path, e));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer(&mut w, &EmbeddingHeader { dim }).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for (id, v) in rows {
        let row = EmbeddingRow {
            id: id.to_string(),
            values: v.values.clone(),
        };
        serde_json::to_writer(&mut w, &row).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub table_id: String,
    pub similarity: f64,
    /// 1-based, descending similarity.
    pub rank: usize,
}

/// One line of `candidates.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    /// Query text, carried along so reranking needs no separate query file.
    pub text: String,
    pub candidates: Vec<Candidate>,
}

/// Table embeddings for a corpus, in corpus order.
pub struct DenseIndex<'c> {
    corpus: &'c Corpus,
    vectors: Vec<EmbeddingVector>,
}

impl<'c> DenseIndex<'c> {
    pub fn build(corpus: &'c Corpus, provider: &dyn EmbeddingProvider) -> Result<Self, EmbedError> {
        let vectors = corpus
            .tables()
            .iter()
            .map(|t| {
                let v = provider.embed(&t.table_id, &t.flattened_text)?;
                check_dim(&t.table_id, provider.dim(), &v)?;
                Ok(v)
            })
            .collect::<Result<Vec<_>, EmbedError>>()?;
        Ok(DenseIndex { corpus, vectors })
    }

    pub fn vectors(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.corpus
            .tables()
            .iter()
            .map(|t| t.table_id.as_str())
            .zip(&self.vectors)
    }

    /// Cosine similarity of `query_vec` against every table, unsorted.
    pub fn scores(&self, query_vec: &EmbeddingVector) -> Vec<(&str, f64)> {
        self.vectors()
            .map(|(id, v)| (id, query_vec.cosine(v)))
            .collect()
    }

    /// The `min(n, |corpus|)` most similar tables; ties go to the smaller
    /// table id.
    pub fn retrieve_top_n(
        &self,
        query: &QueryRecord,
        provider: &dyn EmbeddingProvider,
        n: usize,
    ) -> Result<Vec<Candidate>, EmbedError> {
        let q = provider.embed(&query.query_id, &query.text)?;
        check_dim(&query.query_id, provider.dim(), &q)?;
        let mut scored = self.scores(&q);
        let by_score = |a: &(&str, f64), b: &(&str, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0));
        let keep = n.min(scored.len());
        if keep > 0 && keep < scored.len() {
            scored.select_nth_unstable_by(keep - 1, by_score);
            scored.truncate(keep);
        }
        scored.sort_by(by_score);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (id, similarity))| Candidate {
                table_id: id.to_string(),
                similarity,
                rank: i + 1,
            })
            .collect())
    }
}

fn check_dim(id: &str, expected: usize, v: &EmbeddingVector) -> Result<(), EmbedError> {
    if v.dim() != expected {
        return Err(EmbedError::DimMismatch {
            id: id.to_string(),
            expected,
            found: v.dim(),
        });
    }
    Ok(())
}
