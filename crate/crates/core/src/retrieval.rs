//! Fragment-level retrieval index and document scoring.
//!
//! Every fragment of every document is encoded once. A query is encoded with
//! the same model, compared by cosine similarity against all fragments, and
//! each document is scored from its `K` best fragments with exponentially
//! decaying weights `w_k = exp(-omega * k)`, `k = 1..=K`.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! magic "QIDX" | version u32 | dim u32 | entries u64 | fingerprint [u8; 32]
//! entries * (doc u32 | position u16 | dim * f32)
//! ```

use std::cmp::Ordering;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Corpus, TokenId, Vocabulary};
use crate::encoder::{Encoder, EncoderError};

const INDEX_MAGIC: [u8; 4] = *b"QIDX";
const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 32;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("model produces {actual}-dimensional embeddings, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("document {doc} fragment {position} has a zero or non-finite embedding")]
    DegenerateEmbedding { doc: usize, position: usize },
    #[error("query has no tokens")]
    EmptyQuery,
    #[error("query embedding is zero")]
    ZeroQuery,
    #[error("document has no fragments")]
    NoFragments,
    #[error("index file: {0}")]
    Format(String),
    #[error("index was built with a different model")]
    FingerprintMismatch,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Number of best fragments aggregated per document.
    pub top_k_fragments: usize,
    pub omega: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k_fragments: 3,
            omega: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub doc: u32,
    /// 1-based fragment position.
    pub position: u16,
}

/// Fragment embeddings grouped by document.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    fingerprint: [u8; 32],
    entries: Vec<IndexEntry>,
    embeddings: Vec<f32>,
    doc_ranges: Vec<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc: usize,
    pub score: f64,
    /// Fragment positions behind the aggregated similarities, best first.
    pub top_positions: Vec<u16>,
}

impl RetrievalIndex {
    fn from_parts(dim: usize, fingerprint: [u8; 32], entries: Vec<IndexEntry>, embeddings: Vec<f32>) -> Result<Self> {
        let mut doc_ranges: Vec<Range<usize>> = Vec::new();
        for (k, e) in entries.iter().enumerate() {
            let doc = e.doc as usize;
            if doc < doc_ranges.len() {
                if doc_ranges[doc].end != k || k == 0 {
                    return Err(RetrievalError::Format("entries not grouped by document".into()));
                }
                doc_ranges[doc].end = k + 1;
            } else {
                while doc_ranges.len() < doc {
                    doc_ranges.push(k..k);
                }
                doc_ranges.push(k..k + 1);
            }
        }
        Ok(Self {
            dim,
            fingerprint,
            entries,
            embeddings,
            doc_ranges,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ranges.len()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn embedding(&self, entry: usize) -> &[f32] {
        &self.embeddings[entry * self.dim..(entry + 1) * self.dim]
    }

    /// `(position, embedding)` for every indexed fragment of `doc`.
    pub fn doc_fragments(&self, doc: usize) -> impl Iterator<Item = (u16, &[f32])> + '_ {
        let range = self.doc_ranges.get(doc).cloned().unwrap_or(0..0);
        range.map(move |k| (self.entries[k].position, self.embedding(k)))
    }

    /// Mean of a document's fragment embeddings.
    pub fn doc_embedding(&self, doc: usize) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut count = 0usize;
        for (_, emb) in self.doc_fragments(doc) {
            for (a, v) in acc.iter_mut().zip(emb) {
                *a += *v as f64;
            }
            count += 1;
        }
        (count > 0).then(|| acc.into_iter().map(|a| a / count as f64).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.entries.len() * (6 + 4 * self.dim));
        buf.extend_from_slice(&INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.fingerprint);
        for (k, e) in self.entries.iter().enumerate() {
            buf.extend_from_slice(&e.doc.to_le_bytes());
            buf.extend_from_slice(&e.position.to_le_bytes());
            for v in self.embedding(k) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| RetrievalError::Format(m);
        if bytes.len() < HEADER_LEN || bytes[..4] != INDEX_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != INDEX_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let fingerprint: [u8; 32] = bytes[20..52].try_into().expect("32 bytes");
        let record = 6 + 4 * dim;
        let body = &bytes[HEADER_LEN..];
        if dim == 0 || body.len() != count * record {
            return Err(bad(format!(
                "expected {count} records of {record} bytes, found {} bytes",
                body.len()
            )));
        }
        let mut entries = Vec::with_capacity(count);
        let mut embeddings = Vec::with_capacity(count * dim);
        for rec in body.chunks_exact(record) {
            entries.push(IndexEntry {
                doc: u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes")),
                position: u16::from_le_bytes(rec[4..6].try_into().expect("2 bytes")),
            });
            embeddings.extend(
                rec[6..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))),
            );
        }
        Self::from_parts(dim, fingerprint, entries, embeddings)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Encode every fragment of every document, skipping fragments for which
/// `exclude(doc, position)` holds.
pub fn build_index<E, F>(
    corpus: &Corpus,
    encoder: &E,
    expected_dim: usize,
    fingerprint: [u8; 32],
    exclude: F,
) -> Result<RetrievalIndex>
where
    E: Encoder,
    F: Fn(usize, usize) -> bool + Sync,
{
    if encoder.output_dim() != expected_dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: expected_dim,
            actual: encoder.output_dim(),
        });
    }
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let per_doc: Vec<Vec<(IndexEntry, Vec<f64>)>> = corpus
        .documents
        .par_iter()
        .enumerate()
        .map(|(doc, d)| {
            d.fragments
                .iter()
                .filter(|f| !exclude(doc, f.position))
                .map(|f| {
                    let (h, _) = encoder.encode(&f.tokens)?;
                    if h.iter().any(|v| !v.is_finite()) || h.iter().all(|&v| v as f32 == 0.0) {
                        return Err(RetrievalError::DegenerateEmbedding {
                            doc,
                            position: f.position,
                        });
                    }
                    let entry = IndexEntry {
                        doc: doc as u32,
                        position: f.position as u16,
                    };
                    Ok((entry, h))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::new();
    let mut embeddings = Vec::new();
    for (entry, h) in per_doc.into_iter().flatten() {
        entries.push(entry);
        embeddings.extend(h.iter().map(|&v| v as f32));
    }
    RetrievalIndex::from_parts(expected_dim, fingerprint, entries, embeddings)
}

/// Weight of the `k`-th best fragment (1-based).
pub fn position_weight(k: usize, omega: f64) -> f64 {
    (-omega * k as f64).exp()
}

fn cosine_f32(query: &[f64], query_norm: f64, fragment: &[f32]) -> f64 {
    let (mut dot, mut norm) = (0.0, 0.0);
    for (q, &f) in query.iter().zip(fragment) {
        let f = f as f64;
        dot += q * f;
        norm += f * f;
    }
    if norm == 0.0 {
        0.0
    } else {
        dot / (query_norm * norm.sqrt())
    }
}

/// Aggregate the best `k` of the given fragment similarities.
pub fn aggregate_similarities(similarities: &mut [(f64, u16)], k: usize, omega: f64) -> (f64, Vec<u16>) {
    similarities.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let top = &similarities[..k.min(similarities.len())];
    let score = top
        .iter()
        .enumerate()
        .map(|(i, (r, _))| position_weight(i + 1, omega) * r)
        .sum();
    (score, top.iter().map(|(_, p)| *p).collect())
}

/// Score one document against a query embedding.
pub fn score_document<'a, I>(query: &[f64], doc: usize, fragments: I, k: usize, omega: f64) -> Result<ScoredDoc>
where
    I: IntoIterator<Item = (u16, &'a [f32])>,
{
    let norm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(RetrievalError::ZeroQuery);
    }
    let mut sims: Vec<(f64, u16)> = fragments
        .into_iter()
        .map(|(pos, emb)| (cosine_f32(query, norm, emb), pos))
        .collect();
    if sims.is_empty() {
        return Err(RetrievalError::NoFragments);
    }
    let (score, top_positions) = aggregate_similarities(&mut sims, k, omega);
    Ok(ScoredDoc {
        doc,
        score,
        top_positions,
    })
}

/// Rank all documents for an already encoded query.
pub fn rank_documents(index: &RetrievalIndex, query: &[f64], config: &RetrievalConfig, top_n: usize) -> Result<Vec<ScoredDoc>> {
    let mut scored: Vec<ScoredDoc> = (0..index.doc_count())
        .into_par_iter()
        .filter(|&doc| index.doc_fragments(doc).next().is_some())
        .map(|doc| score_document(query, doc, index.doc_fragments(doc), config.top_k_fragments, config.omega))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.doc.cmp(&b.doc),
        other => other,
    });
    scored.truncate(top_n);
    Ok(scored)
}

/// Encode `tokens` (truncated to one window) and rank documents.
pub fn query_tokens<E: Encoder>(
    index: &RetrievalIndex,
    encoder: &E,
    tokens: &[TokenId],
    max_seq_len: usize,
    config: &RetrievalConfig,
    top_n: usize,
) -> Result<Vec<ScoredDoc>> {
    if tokens.is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    if encoder.output_dim() != index.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim(),
            actual: encoder.output_dim(),
        });
    }
    let window = &tokens[..tokens.len().min(max_seq_len)];
    let (h, _) = encoder.encode(window)?;
    rank_documents(index, &h, config, top_n)
}

/// Tokenize and rank documents for free text.
pub fn query<E: Encoder>(
    index: &RetrievalIndex,
    encoder: &E,
    vocab: &Vocabulary,
    text: &str,
    max_seq_len: usize,
    config: &RetrievalConfig,
    top_n: usize,
) -> Result<Vec<ScoredDoc>> {
    query_tokens(index, encoder, &tokenize(text, vocab), max_seq_len, config, top_n)
}

/// Sidecar describing how an index was built, written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub doc_ids: Vec<String>,
    pub max_seq_len: usize,
    pub holdout_excluded: bool,
    pub model: Option<PathBuf>,
}

impl IndexMeta {
    pub fn path_for(index_path: &Path) -> PathBuf {
        let mut name = index_path.as_os_str().to_owned();
        name.push(".meta.json");
        PathBuf::from(name)
    }

    pub fn save(&self, index_path: &Path) -> Result<()> {
        let path = Self::path_for(index_path);
        let json = serde_json::to_string_pretty(self).expect("meta serializes");
        fs::write(&path, json).map_err(|source| RetrievalError::Io { path, source })
    }

    pub fn load(index_path: &Path) -> Result<Self> {
        let path = Self::path_for(index_path);
        let raw = fs::read_to_string(&path).map_err(|source| RetrievalError::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|e| RetrievalError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_fragment_score() {
        let mut sims = [(0.8, 1)];
        let (score, _) = aggregate_similarities(&mut sims, 3, 0.05);
        assert!((score - (-0.05f64).exp() * 0.8).abs() < 1e-12);
        assert!((score - 0.76098).abs() < 1e-5);
    }

    #[test]
    fn top_two_of_three() {
        let mut sims = [(0.1, 3), (0.9, 1), (0.5, 2)];
        let (score, top) = aggregate_similarities(&mut sims, 2, 0.05);
        let expected = (-0.05f64).exp() * 0.9 + (-0.10f64).exp() * 0.5;
        assert!((score - expected).abs() < 1e-12);
        assert!((score - 1.30852).abs() < 1e-5);
        assert_eq!(top, vec![1, 2]);
    }

    #[test]
    fn zero_omega_sums_everything() {
        let mut sims = [(0.1, 1), (0.9, 2), (-0.5, 3)];
        let (score, _) = aggregate_similarities(&mut sims, 5, 0.0);
        assert!((score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_document_rejects_zero_query_and_empty_docs() {
        let frag: Vec<f32> = vec![1.0, 0.0];
        assert!(matches!(
            score_document(&[0.0, 0.0], 0, [(1u16, frag.as_slice())], 3, 0.05),
            Err(RetrievalError::ZeroQuery)
        ));
        assert!(matches!(
            score_document(&[1.0, 0.0], 0, std::iter::empty(), 3, 0.05),
            Err(RetrievalError::NoFragments)
        ));
    }

    #[test]
    fn own_fragment_similarity_is_one() {
        let frag: Vec<f32> = vec![0.25, -0.75, 0.5];
        let q: Vec<f64> = frag.iter().map(|&v| v as f64).collect();
        let scored = score_document(&q, 0, [(4u16, frag.as_slice())], 1, 0.0).unwrap();
        assert!((scored.score - 1.0).abs() < 1e-12);
        assert_eq!(scored.top_positions, vec![4]);
    }

    fn toy_index() -> RetrievalIndex {
        let entries = vec![
            IndexEntry { doc: 0, position: 1 },
            IndexEntry { doc: 0, position: 2 },
            IndexEntry { doc: 1, position: 1 },
            IndexEntry { doc: 2, position: 1 },
            IndexEntry { doc: 2, position: 2 },
        ];
        let embeddings = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        RetrievalIndex::from_parts(2, [7; 32], entries, embeddings).unwrap()
    }

    #[test]
    fn identical_documents_tie_by_index() {
        let index = toy_index();
        let ranked = rank_documents(&index, &[1.0, 0.2], &RetrievalConfig::default(), 10).unwrap();
        assert_eq!(ranked.len(), 3);
        let docs: Vec<usize> = ranked.iter().map(|s| s.doc).collect();
        let zero = docs.iter().position(|&d| d == 0).unwrap();
        let two = docs.iter().position(|&d| d == 2).unwrap();
        assert_eq!(ranked[zero].score, ranked[two].score);
        assert!(zero < two);
        assert_eq!(rank_documents(&index, &[1.0, 0.2], &RetrievalConfig::default(), 1).unwrap().len(), 1);
    }

    #[test]
    fn bytes_round_trip() {
        let index = toy_index();
        let bytes = index.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 5 * (6 + 8));
        let loaded = RetrievalIndex::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, index);
        assert_eq!(loaded.to_bytes(), bytes);
        assert!(RetrievalIndex::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn ungrouped_entries_rejected() {
        let entries = vec![
            IndexEntry { doc: 0, position: 1 },
            IndexEntry { doc: 1, position: 1 },
            IndexEntry { doc: 0, position: 2 },
        ];
        assert!(RetrievalIndex::from_parts(1, [0; 32], entries, vec![1.0; 3]).is_err());
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn sims() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..=1.0, 1..12)
    }

    fn tagged(values: &[f64]) -> Vec<(f64, u16)> {
        values.iter().enumerate().map(|(i, &v)| (v, i as u16 + 1)).collect()
    }

    proptest! {
        #[test]
        fn weights_strictly_decrease(omega in 1e-3f64..2.0, k in 1usize..50) {
            prop_assert!(position_weight(k + 1, omega) < position_weight(k, omega));
        }

        #[test]
        fn score_ignores_fragment_order(values in sims(), k in 1usize..6, omega in 0.0f64..1.0, rotate in 0usize..12) {
            let (base, _) = aggregate_similarities(&mut tagged(&values), k, omega);
            let mut shuffled = values.clone();
            shuffled.rotate_left(rotate % values.len());
            shuffled.reverse();
            let (other, _) = aggregate_similarities(&mut tagged(&shuffled), k, omega);
            prop_assert!((base - other).abs() < 1e-12);
        }

        #[test]
        fn raising_a_similarity_never_lowers_the_score(values in sims(), k in 1usize..6, omega in 0.0f64..1.0, at in 0usize..12, bump in 0.0f64..1.0) {
            let at = at % values.len();
            let (base, _) = aggregate_similarities(&mut tagged(&values), k, omega);
            let mut raised = values.clone();
            raised[at] = (raised[at] + bump).min(1.0);
            let (after, _) = aggregate_similarities(&mut tagged(&raised), k, omega);
            prop_assert!(after >= base - 1e-12);
        }

        #[test]
        fn scores_stay_within_weight_mass(
            query in prop::collection::vec(-1.0f64..1.0, 4),
            fragments in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..8),
            k in 1usize..5,
            omega in 0.0f64..1.0,
        ) {
            prop_assume!(query.iter().any(|&q| q != 0.0));
            let scored = score_document(&query, 0, fragments.iter().enumerate().map(|(i, f)| (i as u16 + 1, f.as_slice())), k, omega).unwrap();
            let mass: f64 = (1..=k).map(|i| position_weight(i, omega)).sum();
            prop_assert!(scored.score.abs() <= mass + 1e-9);
        }

        #[test]
        fn own_fragment_is_a_perfect_match(
            fragments in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 5), 1..6),
            pick in 0usize..6,
        ) {
            let pick = pick % fragments.len();
            prop_assume!(fragments[pick].iter().any(|&x| x != 0.0));
            let query: Vec<f64> = fragments[pick].iter().map(|&x| x as f64).collect();
            let scored = score_document(&query, 0, fragments.iter().enumerate().map(|(i, f)| (i as u16 + 1, f.as_slice())), 1, 0.0).unwrap();
            prop_assert!((scored.score - 1.0).abs() < 1e-9);
        }
    }
}
