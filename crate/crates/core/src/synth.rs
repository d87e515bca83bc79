//! Clustered synthetic corpus with a planted link structure.
//!
//! Documents belong to equal-sized clusters. Each token is drawn from the
//! document's own keywords, its cluster vocabulary, or a shared pool. Edges
//! appear independently with `intra_edge_prob` inside a cluster and
//! `intra_edge_prob / 20` across clusters.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DocRecord, EdgeRecord};
use crate::eval::RelevanceSet;

/// Ratio between intra- and cross-cluster edge probabilities.
pub const CROSS_CLUSTER_DIVISOR: f64 = 20.0;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const EDGES_FILE: &str = "edges.tsv";
pub const RELEVANCE_FILE: &str = "relevance.jsonl";
pub const CLUSTERS_FILE: &str = "clusters.tsv";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate sizes: {0}")]
    DegenerateSizes(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_clusters: usize,
    pub vocab_per_cluster: usize,
    pub shared_vocab: usize,
    pub intra_edge_prob: f64,
    pub seed: u64,
    /// Tokens per document.
    pub doc_len: usize,
    /// Distinct keywords owned by each document.
    pub doc_keywords: usize,
    /// Probability that a token is one of the document's keywords.
    pub keyword_frac: f64,
    /// Probability that a token comes from the cluster vocabulary.
    pub cluster_frac: f64,
    pub queries_per_cluster: usize,
    pub query_len: usize,
    /// Cluster-vocabulary probability for query tokens; the rest are shared.
    pub query_cluster_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_docs: 200,
            n_clusters: 10,
            vocab_per_cluster: 100,
            shared_vocab: 100,
            intra_edge_prob: 0.03,
            seed: 7,
            doc_len: 192,
            doc_keywords: 6,
            keyword_frac: 0.1,
            cluster_frac: 0.5,
            queries_per_cluster: 5,
            query_len: 32,
            query_cluster_frac: 0.5,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::DegenerateSizes(m.to_string()));
        if self.n_clusters < 2 {
            return bad("need at least two clusters");
        }
        if self.n_docs == 0 || !self.n_docs.is_multiple_of(self.n_clusters) {
            return bad("n_docs must be a positive multiple of n_clusters");
        }
        if self.vocab_per_cluster == 0 || self.shared_vocab == 0 || self.doc_len == 0 {
            return bad("vocabulary sizes and doc_len must be positive");
        }
        if self.keyword_frac > 0.0 && self.doc_keywords == 0 {
            return bad("keyword_frac > 0 needs doc_keywords > 0");
        }
        let fracs = [self.keyword_frac, self.cluster_frac, self.query_cluster_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || self.keyword_frac + self.cluster_frac > 1.0 {
            return bad("token fractions must lie in [0, 1] and sum to at most 1");
        }
        if !(0.0..=1.0).contains(&self.intra_edge_prob) {
            return bad("intra_edge_prob must lie in [0, 1]");
        }
        if self.queries_per_cluster > 0 && self.query_len == 0 {
            return bad("query_len must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<DocRecord>,
    pub edges: Vec<EdgeRecord>,
    /// Cluster of each document, aligned with `documents`.
    pub clusters: Vec<usize>,
    /// Cluster-level queries; every document of the cluster is relevant.
    pub relevance: Vec<RelevanceSet>,
}

pub fn doc_id(i: usize) -> String {
    format!("doc{i:04}")
}

fn shared_word(k: usize) -> String {
    format!("s{k}")
}

fn cluster_word(c: usize, k: usize) -> String {
    format!("c{c}w{k}")
}

fn keyword(doc: usize, k: usize) -> String {
    format!("d{doc}k{k}")
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_cluster = config.n_docs / config.n_clusters;
    let clusters: Vec<usize> = (0..config.n_docs).map(|i| i / per_cluster).collect();

    let documents = (0..config.n_docs)
        .map(|i| {
            let words: Vec<String> = (0..config.doc_len)
                .map(|_| {
                    let u: f64 = rng.gen();
                    if u < config.keyword_frac {
                        keyword(i, rng.gen_range(0..config.doc_keywords))
                    } else if u < config.keyword_frac + config.cluster_frac {
                        cluster_word(clusters[i], rng.gen_range(0..config.vocab_per_cluster))
                    } else {
                        shared_word(rng.gen_range(0..config.shared_vocab))
                    }
                })
                .collect();
            DocRecord {
                id: doc_id(i),
                text: words.join(" "),
            }
        })
        .collect();

    let cross = config.intra_edge_prob / CROSS_CLUSTER_DIVISOR;
    let mut edges = Vec::new();
    for i in 0..config.n_docs {
        for j in i + 1..config.n_docs {
            let p = if clusters[i] == clusters[j] {
                config.intra_edge_prob
            } else {
                cross
            };
            if rng.gen::<f64>() < p {
                edges.push(EdgeRecord {
                    src: doc_id(i),
                    dst: doc_id(j),
                    weight: 1.0,
                });
            }
        }
    }

    let mut relevance = Vec::new();
    for c in 0..config.n_clusters {
        let members: BTreeSet<String> = (c * per_cluster..(c + 1) * per_cluster).map(doc_id).collect();
        for _ in 0..config.queries_per_cluster {
            let words: Vec<String> = (0..config.query_len)
                .map(|_| {
                    if rng.gen::<f64>() < config.query_cluster_frac {
                        cluster_word(c, rng.gen_range(0..config.vocab_per_cluster))
                    } else {
                        shared_word(rng.gen_range(0..config.shared_vocab))
                    }
                })
                .collect();
            relevance.push(RelevanceSet {
                query: words.join(" "),
                relevant: members.clone(),
            });
        }
    }

    Ok(SyntheticCorpus {
        documents,
        edges,
        clusters,
        relevance,
    })
}

impl SyntheticCorpus {
    /// Write corpus, edge, relevance and cluster-label files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SynthError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut corpus = Vec::new();
        for d in &self.documents {
            serde_json::to_writer(&mut corpus, d).expect("record serializes");
            corpus.push(b'\n');
        }
        let mut edges = Vec::new();
        for e in &self.edges {
            writeln!(edges, "{}\t{}", e.src, e.dst).expect("in-memory write");
        }
        let mut relevance = Vec::new();
        for r in &self.relevance {
            serde_json::to_writer(&mut relevance, r).expect("record serializes");
            relevance.push(b'\n');
        }
        let mut clusters = Vec::new();
        for (d, c) in self.documents.iter().zip(&self.clusters) {
            writeln!(clusters, "{}\t{c}", d.id).expect("in-memory write");
        }
        for (name, bytes) in [
            (CORPUS_FILE, corpus),
            (EDGES_FILE, edges),
            (RELEVANCE_FILE, relevance),
            (CLUSTERS_FILE, clusters),
        ] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io(&path))?;
        }
        Ok(())
    }
}
