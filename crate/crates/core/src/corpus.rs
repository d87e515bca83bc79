//! Corpus data model: vocabulary, tokenization, overlapping fragments, and
//! ingestion of documents and relationship edges from disk.
//!
//! Documents are read from newline-delimited JSON (`{"id": ..., "text": ...}`)
//! and edges from a tab-separated file (`src<TAB>dst[<TAB>weight]`). The row
//! index of a document in the adjacency matrix is its position in the corpus
//! file after rejected documents have been removed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a [`Vocabulary`].
pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const MASK_ID: TokenId = 2;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED_IDS: TokenId = 3;

const RESERVED_TOKENS: [&str; RESERVED_IDS as usize] = ["[PAD]", "[UNK]", "[MASK]"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("document has no tokens")]
    EmptyDocument,
    #[error("corpus contains no valid documents")]
    NoDocuments,
    #[error("invalid fragmentation: max_seq_len={max_seq_len}, stride={stride}")]
    InvalidWindow { max_seq_len: usize, stride: usize },
    #[error("edge ({src}, {dst}) out of range for {n} documents")]
    EdgeOutOfRange { src: usize, dst: usize, n: usize },
    #[error("edge weight must be finite and non-negative, got {0}")]
    InvalidWeight(f64),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Settings that control how raw text becomes fragments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub max_seq_len: usize,
    pub stride: usize,
    pub vocab_size: usize,
    pub undirected: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            max_seq_len: 128,
            stride: 64,
            vocab_size: 50_000,
            undirected: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenization
// ---------------------------------------------------------------------------

/// Bidirectional token/id map with reserved `[PAD]`, `[UNK]` and `[MASK]` ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build a vocabulary from raw texts, keeping the `max_size` most frequent
    /// words. Ties are ordered alphabetically so the result is deterministic.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in split_words(text) {
                *counts.entry(word).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        Self::from_words(ranked.into_iter().map(|(w, _)| w))
            .expect("split_words never yields reserved or duplicate tokens")
    }

    /// Vocabulary whose non-reserved ids are assigned in iteration order.
    pub fn from_words<I>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = String>,
    {
        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for word in words {
            if RESERVED_TOKENS.contains(&word.as_str()) {
                return Err(CorpusError::Vocabulary(format!("`{word}` is reserved")));
            }
            let id = id_to_token.len() as TokenId;
            if token_to_id.insert(word.clone(), id).is_some() {
                return Err(CorpusError::Vocabulary(format!("duplicate token `{word}`")));
            }
            id_to_token.push(word);
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    /// Id for `word`, or [`UNK_ID`] when absent.
    pub fn id(&self, word: &str) -> TokenId {
        self.token_to_id.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == RESERVED_IDS as usize
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id < RESERVED_IDS
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.id_to_token[RESERVED_IDS as usize..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self.words()).expect("string list serializes");
        fs::write(path, json).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let words: Vec<String> = serde_json::from_str(&raw).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_words(words)
    }
}

/// Lowercased words; any character that is not alphanumeric separates words.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    split_words(text).map(|w| vocab.id(&w)).collect()
}

// ---------------------------------------------------------------------------
// Fragments and documents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub tokens: Vec<TokenId>,
    /// 1-based position within the document.
    pub position: usize,
}

/// Split `tokens` into windows of at most `max_seq_len` starting every
/// `stride` tokens. A window is not emitted once the previous one already
/// reaches the end of the sequence.
pub fn fragment(tokens: &[TokenId], max_seq_len: usize, stride: usize) -> Result<Vec<Fragment>> {
    if max_seq_len == 0 || stride == 0 || stride > max_seq_len {
        return Err(CorpusError::InvalidWindow {
            max_seq_len,
            stride,
        });
    }
    if tokens.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    let mut fragments = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max_seq_len).min(tokens.len());
        fragments.push(Fragment {
            tokens: tokens[start..end].to_vec(),
            position: fragments.len() + 1,
        });
        if end == tokens.len() {
            break;
        }
        start += stride;
    }
    Ok(fragments)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub raw_text: String,
    pub fragments: Vec<Fragment>,
}

impl Document {
    pub fn fragment_count(&self) -> usize {
        self.fragments.len()
    }
}

// ---------------------------------------------------------------------------
// Adjacency
// ---------------------------------------------------------------------------

/// Sparse non-negative relationship weights between documents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl AdjacencyMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: BTreeMap::new(),
        }
    }

    /// Record an edge weight. Self-edges and zero weights are ignored; a
    /// repeated edge keeps the larger weight.
    pub fn insert(&mut self, src: usize, dst: usize, weight: f64) -> Result<()> {
        if src >= self.n || dst >= self.n {
            return Err(CorpusError::EdgeOutOfRange { src, dst, n: self.n });
        }
        if !weight.is_finite() || weight < 0.0 {
            return Err(CorpusError::InvalidWeight(weight));
        }
        if src == dst || weight == 0.0 {
            return Ok(());
        }
        let slot = self.entries.entry((src, dst)).or_insert(0.0);
        *slot = slot.max(weight);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Entries `(i, j, weight)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &w)| (i, j, w))
    }

    /// Make the matrix symmetric by taking `max(A_ij, A_ji)`.
    pub fn symmetrize(&mut self) {
        let mirrored: Vec<_> = self.iter().map(|(i, j, w)| (j, i, w)).collect();
        for (i, j, w) in mirrored {
            let slot = self.entries.entry((i, j)).or_insert(0.0);
            *slot = slot.max(w);
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus and ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub adjacency: AdjacencyMatrix,
    pub vocabulary: Vocabulary,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn index_of(&self, doc_id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.doc_id == doc_id)
    }

    pub fn total_fragments(&self) -> usize {
        self.documents.iter().map(Document::fragment_count).sum()
    }
}

/// One line of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocRecord {
    pub id: String,
    pub text: String,
}

/// One line of the edge file, still keyed by document id.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub src: String,
    pub dst: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    /// Edges naming a document that is not in the corpus.
    pub skipped_edges: usize,
    /// Documents dropped because they tokenize to nothing.
    pub rejected_documents: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_documents(path: &Path) -> Result<Vec<DocRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_edges(path: &Path) -> Result<Vec<EdgeRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut edges = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let weight = match fields.len() {
            2 => 1.0,
            3 => fields[2]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad weight `{}`: {e}", fields[2])))?,
            k => return Err(parse_err(format!("expected 2 or 3 tab-separated fields, got {k}"))),
        };
        edges.push(EdgeRecord {
            src: fields[0].to_string(),
            dst: fields[1].to_string(),
            weight,
        });
    }
    Ok(edges)
}

/// Assemble a corpus from parsed records. When `vocab` is `None` a vocabulary
/// is built from the admitted documents.
pub fn build_corpus(
    records: Vec<DocRecord>,
    edges: &[EdgeRecord],
    vocab: Option<Vocabulary>,
    config: &CorpusConfig,
) -> Result<(Corpus, IngestReport)> {
    let mut report = IngestReport::default();
    let mut seen = HashMap::new();
    for record in &records {
        if seen.insert(record.id.as_str(), ()).is_some() {
            return Err(CorpusError::DuplicateId(record.id.clone()));
        }
    }
    let records: Vec<DocRecord> = records
        .into_iter()
        .filter(|r| {
            let keep = split_words(&r.text).next().is_some();
            if !keep {
                log::warn!("rejecting document `{}`: no tokens", r.id);
                report.rejected_documents += 1;
            }
            keep
        })
        .collect();
    if records.is_empty() {
        return Err(CorpusError::NoDocuments);
    }
    let vocabulary = match vocab {
        Some(v) => v,
        None => Vocabulary::build(records.iter().map(|r| r.text.as_str()), config.vocab_size),
    };

    let mut documents = Vec::with_capacity(records.len());
    for record in records {
        let tokens = tokenize(&record.text, &vocabulary);
        let fragments = fragment(&tokens, config.max_seq_len, config.stride)?;
        documents.push(Document {
            doc_id: record.id,
            raw_text: record.text,
            fragments,
        });
    }

    let index: HashMap<&str, usize> = documents
        .iter()
        .enumerate()
        .map(|(i, d)| (d.doc_id.as_str(), i))
        .collect();
    let mut adjacency = AdjacencyMatrix::new(documents.len());
    for edge in edges {
        match (index.get(edge.src.as_str()), index.get(edge.dst.as_str())) {
            (Some(&i), Some(&j)) => adjacency.insert(i, j, edge.weight)?,
            _ => report.skipped_edges += 1,
        }
    }
    if report.skipped_edges > 0 {
        log::warn!("skipped {} edges with unknown endpoints", report.skipped_edges);
    }
    if config.undirected {
        adjacency.symmetrize();
    }

    Ok((
        Corpus {
            documents,
            adjacency,
            vocabulary,
        },
        report,
    ))
}

/// Read the corpus and edge files and build a [`Corpus`] with a fresh vocabulary.
pub fn ingest(
    corpus_path: &Path,
    edges_path: &Path,
    config: &CorpusConfig,
) -> Result<(Corpus, IngestReport)> {
    let records = read_documents(corpus_path)?;
    let edges = read_edges(edges_path)?;
    build_corpus(records, &edges, None, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ids(range: std::ops::Range<u32>) -> Vec<TokenId> {
        range.collect()
    }

    #[test]
    fn tokenize_empty_text() {
        let vocab = Vocabulary::build(["a b"], 10);
        assert!(tokenize("", &vocab).is_empty());
    }

    #[test]
    fn tokenize_lowercases_and_drops_punctuation() {
        let text = "Virus mortality, virus spread";
        let vocab = Vocabulary::build([text], 10);
        assert_eq!(vocab.id("virus"), 3);
        assert_eq!(vocab.id("mortality"), 4);
        assert_eq!(vocab.id("spread"), 5);
        assert_eq!(tokenize(text, &vocab), vec![3, 4, 3, 5]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let vocab = Vocabulary::build(["alpha beta"], 10);
        assert_eq!(tokenize("alpha gamma beta", &vocab), vec![vocab.id("alpha"), UNK_ID, vocab.id("beta")]);
    }

    #[test]
    fn vocab_cap_keeps_most_frequent() {
        let vocab = Vocabulary::build(["a a a b b c"], 2);
        assert_eq!(vocab.words(), &["a".to_string(), "b".to_string()]);
        assert_eq!(vocab.id("c"), UNK_ID);
    }

    #[test]
    fn reserved_words_rejected() {
        assert!(Vocabulary::from_words(vec!["[MASK]".to_string()]).is_err());
        assert!(Vocabulary::from_words(vec!["x".to_string(), "x".to_string()]).is_err());
    }

    #[test]
    fn fragment_300_tokens() {
        let frags = fragment(&ids(0..300), 128, 64).unwrap();
        let starts: Vec<u32> = frags.iter().map(|f| f.tokens[0]).collect();
        let lens: Vec<usize> = frags.iter().map(|f| f.tokens.len()).collect();
        assert_eq!(starts, vec![0, 64, 128, 192]);
        assert_eq!(lens, vec![128, 128, 128, 108]);
        assert_eq!(frags.iter().map(|f| f.position).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn fragment_short_and_exact_inputs() {
        assert_eq!(fragment(&ids(0..100), 128, 64).unwrap().len(), 1);
        let exact = fragment(&ids(0..128), 128, 64).unwrap();
        assert_eq!(exact.len(), 1);
        assert_eq!(exact[0].tokens.len(), 128);
    }

    #[test]
    fn fragment_rejects_empty_and_bad_windows() {
        assert!(matches!(fragment(&[], 128, 64), Err(CorpusError::EmptyDocument)));
        assert!(fragment(&[1, 2], 0, 1).is_err());
        assert!(fragment(&[1, 2], 4, 5).is_err());
        assert!(fragment(&[1, 2], 4, 0).is_err());
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    const DOCS: &str = r#"{"id": "a", "text": "alpha beta gamma"}
{"id": "b", "text": "beta gamma delta"}
{"id": "c", "text": "gamma delta epsilon"}
"#;

    #[test]
    fn ingest_counts_entries() {
        let dir = tempfile::tempdir().unwrap();
        let docs = write(dir.path(), "docs.jsonl", DOCS);
        let edges = write(dir.path(), "edges.tsv", "a\tb\nb\tc\t2.5\n");

        let directed = CorpusConfig {
            undirected: false,
            ..CorpusConfig::default()
        };
        let (corpus, report) = ingest(&docs, &edges, &directed).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.adjacency.dim(), 3);
        assert_eq!(corpus.adjacency.nnz(), 2);
        assert_eq!(corpus.adjacency.get(1, 2), 2.5);
        assert_eq!(report, IngestReport::default());

        let (corpus, _) = ingest(&docs, &edges, &CorpusConfig::default()).unwrap();
        assert_eq!(corpus.adjacency.nnz(), 4);
        assert_eq!(corpus.adjacency.get(2, 1), 2.5);
    }

    #[test]
    fn ingest_skips_unknown_edges_and_self_loops() {
        let dir = tempfile::tempdir().unwrap();
        let docs = write(dir.path(), "docs.jsonl", DOCS);
        let edges = write(dir.path(), "edges.tsv", "a\tb\na\tzzz\nc\tc\n");
        let (corpus, report) = ingest(&docs, &edges, &CorpusConfig::default()).unwrap();
        assert_eq!(report.skipped_edges, 1);
        assert_eq!(corpus.adjacency.nnz(), 2);
        assert_eq!(corpus.adjacency.get(2, 2), 0.0);
    }

    #[test]
    fn ingest_rejects_duplicates_and_empty_corpora() {
        let dir = tempfile::tempdir().unwrap();
        let edges = write(dir.path(), "edges.tsv", "");
        let dup = write(
            dir.path(),
            "dup.jsonl",
            "{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"a\", \"text\": \"y\"}\n",
        );
        assert!(matches!(
            ingest(&dup, &edges, &CorpusConfig::default()),
            Err(CorpusError::DuplicateId(id)) if id == "a"
        ));
        let empty = write(dir.path(), "empty.jsonl", "{\"id\": \"a\", \"text\": \"...\"}\n");
        assert!(matches!(
            ingest(&empty, &edges, &CorpusConfig::default()),
            Err(CorpusError::NoDocuments)
        ));
        let missing = dir.path().join("nope.jsonl");
        assert!(matches!(
            ingest(&missing, &edges, &CorpusConfig::default()),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn ingest_rejects_tokenless_documents() {
        let dir = tempfile::tempdir().unwrap();
        let docs = write(
            dir.path(),
            "docs.jsonl",
            "{\"id\": \"a\", \"text\": \"word\"}\n{\"id\": \"b\", \"text\": \" , \"}\n",
        );
        let edges = write(dir.path(), "edges.tsv", "a\tb\n");
        let (corpus, report) = ingest(&docs, &edges, &CorpusConfig::default()).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(report.rejected_documents, 1);
        assert_eq!(report.skipped_edges, 1);
    }

    #[test]
    fn malformed_edge_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let edges = write(dir.path(), "edges.tsv", "a\tb\tx\n");
        assert!(matches!(read_edges(&edges), Err(CorpusError::Parse { line: 1, .. })));
        let edges = write(dir.path(), "edges2.tsv", "a b\n");
        assert!(read_edges(&edges).is_err());
    }

    #[test]
    fn negative_weight_rejected() {
        let mut a = AdjacencyMatrix::new(2);
        assert!(a.insert(0, 1, -1.0).is_err());
        assert!(a.insert(0, 5, 1.0).is_err());
    }

    #[test]
    fn vocabulary_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build(["one two two three"], 10);
        let path = dir.path().join("vocab.json");
        vocab.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
    }
}
