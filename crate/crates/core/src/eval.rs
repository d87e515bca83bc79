//! Retrieval metrics and representation-space diagnostics.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Corpus, Vocabulary};
use crate::encoder::{distance, Encoder};
use crate::link_analysis::{rank_neighbors, IntimacyMatrix, LinkError};
use crate::pair_miner::partition;
use crate::retrieval::{query_tokens, RetrievalConfig, RetrievalError, RetrievalIndex};

/// Pairs per group below which distance statistics are refused.
pub const MIN_PAIRS: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("relevance entry {line}: unknown document `{doc_id}`")]
    UnknownDocument { line: usize, doc_id: String },
    #[error("no holdout fragments to query")]
    EmptyHoldout,
    #[error("too few eligible anchors ({found})")]
    TooFewAnchors { found: usize },
    #[error("at least {MIN_PAIRS} sampled pairs are required, got {0}")]
    TooFewSamples(usize),
    #[error("index covers {index} documents, corpus has {corpus}")]
    IndexMismatch { index: usize, corpus: usize },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Recall@K
// ---------------------------------------------------------------------------

/// One query with its ground-truth relevant documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceSet {
    pub query: String,
    pub relevant: BTreeSet<String>,
}

impl RelevanceSet {
    /// Map doc ids to ordinals; `line` is only used in errors.
    pub fn resolve(&self, doc_index: &HashMap<&str, usize>, line: usize) -> Result<BTreeSet<usize>> {
        if self.relevant.is_empty() {
            return Err(EvalError::EmptyRelevant);
        }
        self.relevant
            .iter()
            .map(|id| {
                doc_index.get(id.as_str()).copied().ok_or_else(|| EvalError::UnknownDocument {
                    line,
                    doc_id: id.clone(),
                })
            })
            .collect()
    }
}

pub fn read_relevance(path: &Path) -> Result<Vec<RelevanceSet>> {
    let file = fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut sets = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let set: RelevanceSet = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if set.relevant.is_empty() {
            return Err(EvalError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "empty relevant set".into(),
            });
        }
        sets.push(set);
    }
    Ok(sets)
}

/// `|relevant ∩ top K| / |relevant|` for a ranking of document ordinals.
pub fn recall_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevant);
    }
    let hits = ranked.iter().take(k).filter(|d| relevant.contains(d)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub queries: usize,
    /// `(K, mean Recall@K)` in the order requested.
    pub recall: Vec<(usize, f64)>,
}

/// Mean Recall@K over every relevance set, for each requested K. `doc_ids`
/// lists the indexed documents by ordinal.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_recall<E: Encoder>(
    index: &RetrievalIndex,
    encoder: &E,
    vocab: &Vocabulary,
    doc_ids: &[String],
    sets: &[RelevanceSet],
    ks: &[usize],
    max_seq_len: usize,
    config: &RetrievalConfig,
) -> Result<RecallReport> {
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let top = ks.iter().copied().max().unwrap_or(1);
    let doc_index: HashMap<&str, usize> = doc_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let per_query: Vec<Vec<f64>> = sets
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let relevant = set.resolve(&doc_index, i + 1)?;
            let tokens = tokenize(&set.query, vocab);
            let ranked: Vec<usize> = query_tokens(index, encoder, &tokens, max_seq_len, config, top)?
                .into_iter()
                .map(|s| s.doc)
                .collect();
            ks.iter().map(|&k| recall_at_k(&ranked, &relevant, k)).collect()
        })
        .collect::<Result<_>>()?;
    let recall = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mean = if per_query.is_empty() {
                0.0
            } else {
                per_query.iter().map(|r| r[j]).sum::<f64>() / per_query.len() as f64
            };
            (k, mean)
        })
        .collect();
    Ok(RecallReport {
        queries: sets.len(),
        recall,
    })
}

// ---------------------------------------------------------------------------
// Self-prediction
// ---------------------------------------------------------------------------

/// `(document, 1-based fragment position)` of the last fragment of every
/// document with at least two fragments.
pub fn holdout_fragments(corpus: &Corpus) -> Vec<(usize, usize)> {
    corpus
        .documents
        .iter()
        .enumerate()
        .filter(|(_, d)| d.fragments.len() >= 2)
        .map(|(i, d)| (i, d.fragments.len()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfPredictionReport {
    pub queries: usize,
    pub hits: usize,
    pub accuracy: f64,
    /// Accuracy of a uniformly random ranking, `1 / N`.
    pub random_baseline: f64,
}

/// Query with each holdout fragment and count how often its own document
/// ranks first.
pub fn self_prediction_eval<E: Encoder>(
    corpus: &Corpus,
    index: &RetrievalIndex,
    encoder: &E,
    holdout: &[(usize, usize)],
    max_seq_len: usize,
    config: &RetrievalConfig,
) -> Result<SelfPredictionReport> {
    if holdout.is_empty() {
        return Err(EvalError::EmptyHoldout);
    }
    let hits: Vec<bool> = holdout
        .par_iter()
        .map(|&(doc, position)| {
            let tokens = &corpus.documents[doc].fragments[position - 1].tokens;
            let top = query_tokens(index, encoder, tokens, max_seq_len, config, 1)?;
            Ok(top.first().is_some_and(|s| s.doc == doc))
        })
        .collect::<Result<_>>()?;
    let hits = hits.iter().filter(|&&h| h).count();
    Ok(SelfPredictionReport {
        queries: holdout.len(),
        hits,
        accuracy: hits as f64 / holdout.len() as f64,
        random_baseline: 1.0 / index.doc_count().max(1) as f64,
    })
}

// ---------------------------------------------------------------------------
// Separation diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceStats {
    pub count: usize,
    pub mean: f64,
    pub std_dev: f64,
}

impl DistanceStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let count = xs.len();
        let mean = xs.iter().sum::<f64>() / count.max(1) as f64;
        let var = if count > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (count - 1) as f64
        } else {
            0.0
        };
        Self {
            count,
            mean,
            std_dev: var.sqrt(),
        }
    }
}

/// Cohen's d of `b` over `a` with pooled standard deviation; positive when
/// `b` has the larger mean.
pub fn cohens_d(a: &DistanceStats, b: &DistanceStats) -> f64 {
    let dof = (a.count + b.count).saturating_sub(2).max(1) as f64;
    let pooled = (((a.count.saturating_sub(1)) as f64 * a.std_dev.powi(2)
        + (b.count.saturating_sub(1)) as f64 * b.std_dev.powi(2))
        / dof)
        .sqrt();
    if pooled == 0.0 {
        0.0
    } else {
        (b.mean - a.mean) / pooled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub related: DistanceStats,
    pub unrelated: DistanceStats,
    /// Cohen's d of unrelated over related distances; positive means related
    /// documents sit closer.
    pub effect_size: f64,
    /// Anchors with at least one related and one unrelated document.
    pub pair_anchors: usize,
    /// Anchors whose partition has valid levels 1, 2 and 3.
    pub level_anchors: usize,
    /// Fraction of level anchors with level-3 ≤ level-2 ≤ level-1 distance ranks.
    pub level_ordering_accuracy: Option<f64>,
    /// Among misordered anchors, the fraction whose error is one adjacent swap.
    pub adjacent_swap_fraction: Option<f64>,
}

/// Outcome of the per-anchor level ordering check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelOrdering {
    Correct,
    AdjacentSwap,
    Other,
}

/// Classify mean distance ranks of the level-1, level-2 and level-3
/// negatives; the expected order is `r3 <= r2 <= r1`.
pub fn classify_ordering(r1: f64, r2: f64, r3: f64) -> LevelOrdering {
    if r3 <= r2 && r2 <= r1 {
        LevelOrdering::Correct
    } else if r3 <= r1 {
        // Level 1 still farthest than level 3: exactly one adjacent pair is out of order.
        LevelOrdering::AdjacentSwap
    } else {
        LevelOrdering::Other
    }
}

/// Mean 1-based rank (by ascending distance to `anchor`, ties averaged) of
/// the documents in `group`.
fn mean_rank(distances: &[(usize, f64)], group: &[usize]) -> f64 {
    let rank_of = |doc: usize| {
        let d = distances.iter().find(|(j, _)| *j == doc).map(|p| p.1).expect("doc present");
        let below = distances.iter().filter(|(_, x)| *x < d).count() as f64;
        let equal = distances.iter().filter(|(_, x)| *x == d).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    group.iter().map(|&d| rank_of(d)).sum::<f64>() / group.len() as f64
}

/// Compare embedding distances of structurally related (`𝔸 > 0`) and
/// unrelated document pairs, and check per-anchor ordering across the first
/// three partition levels. Documents are represented by the mean of their
/// indexed fragment embeddings.
pub fn separation_diagnostics(
    index: &RetrievalIndex,
    intimacy: &IntimacyMatrix,
    samples: usize,
    seed: u64,
) -> Result<DiagnosticsReport> {
    if samples < MIN_PAIRS {
        return Err(EvalError::TooFewSamples(samples));
    }
    let n = intimacy.dim();
    if index.doc_count() != n {
        return Err(EvalError::IndexMismatch {
            index: index.doc_count(),
            corpus: n,
        });
    }
    let embeddings: Vec<Option<Vec<f64>>> = (0..n).map(|d| index.doc_embedding(d)).collect();
    let present = |d: usize| embeddings[d].is_some();
    let dist = |a: usize, b: usize| {
        distance(embeddings[a].as_ref().expect("present"), embeddings[b].as_ref().expect("present"))
            .expect("equal dimensions")
    };

    let mut related_of = Vec::with_capacity(n);
    let mut unrelated_of = Vec::with_capacity(n);
    for i in 0..n {
        let row = intimacy.row(i)?;
        let (mut rel, mut unrel) = (Vec::new(), Vec::new());
        for j in (0..n).filter(|&j| j != i && present(j)) {
            if row[j] > 0.0 {
                rel.push(j);
            } else {
                unrel.push(j);
            }
        }
        related_of.push(rel);
        unrelated_of.push(unrel);
    }
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| present(i) && !related_of[i].is_empty() && !unrelated_of[i].is_empty())
        .collect();
    if anchors.is_empty() {
        return Err(EvalError::TooFewAnchors { found: 0 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut related = Vec::with_capacity(samples);
    let mut unrelated = Vec::with_capacity(samples);
    for _ in 0..samples {
        let a = anchors[rng.gen_range(0..anchors.len())];
        let r = *related_of[a].choose(&mut rng).expect("non-empty");
        related.push(dist(a, r));
        let a = anchors[rng.gen_range(0..anchors.len())];
        let u = *unrelated_of[a].choose(&mut rng).expect("non-empty");
        unrelated.push(dist(a, u));
    }
    let related = DistanceStats::from_samples(&related);
    let unrelated = DistanceStats::from_samples(&unrelated);

    let outcomes: Vec<LevelOrdering> = (0..n)
        .into_par_iter()
        .filter(|&i| present(i))
        .map(|i| -> Result<Option<LevelOrdering>> {
            let row = intimacy.row(i)?;
            let Ok(levels) = partition(&rank_neighbors(&row, i)) else {
                return Ok(None);
            };
            if levels.level_count() < 3 || levels.levels[..3].iter().any(|l| l.negatives.is_none()) {
                return Ok(None);
            }
            let negatives: Vec<Vec<usize>> = levels.levels[..3]
                .iter()
                .map(|l| {
                    l.negatives
                        .clone()
                        .expect("checked")
                        .map(|p| levels.at(p))
                        .filter(|&d| present(d))
                        .collect()
                })
                .collect();
            if negatives.iter().any(|g| g.is_empty()) {
                return Ok(None);
            }
            let distances: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i && present(j))
                .map(|j| (j, dist(i, j)))
                .collect();
            let r: Vec<f64> = negatives.iter().map(|g| mean_rank(&distances, g)).collect();
            Ok(Some(classify_ordering(r[0], r[1], r[2])))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let level_anchors = outcomes.len();
    let correct = outcomes.iter().filter(|o| **o == LevelOrdering::Correct).count();
    let failures = level_anchors - correct;
    let adjacent = outcomes.iter().filter(|o| **o == LevelOrdering::AdjacentSwap).count();

    Ok(DiagnosticsReport {
        effect_size: cohens_d(&related, &unrelated),
        related,
        unrelated,
        pair_anchors: anchors.len(),
        level_anchors,
        level_ordering_accuracy: (level_anchors > 0).then(|| correct as f64 / level_anchors as f64),
        adjacent_swap_fraction: (failures > 0).then(|| adjacent as f64 / failures as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn recall_examples() {
        let ranked = [3, 7, 1, 9, 4, 8];
        assert_eq!(recall_at_k(&ranked, &set(&[7, 4]), 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked, &set(&[7, 11, 12, 13]), 5).unwrap(), 0.25);
        assert_eq!(recall_at_k(&ranked, &set(&[8]), 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ranked, &set(&[8]), 6).unwrap(), 1.0);
    }

    #[test]
    fn recall_errors() {
        assert!(matches!(recall_at_k(&[1], &set(&[1]), 0), Err(EvalError::ZeroK)));
        assert!(matches!(recall_at_k(&[1], &set(&[]), 1), Err(EvalError::EmptyRelevant)));
    }

    #[test]
    fn ordering_classification() {
        assert_eq!(classify_ordering(3.0, 2.0, 1.0), LevelOrdering::Correct);
        assert_eq!(classify_ordering(2.0, 2.0, 2.0), LevelOrdering::Correct);
        assert_eq!(classify_ordering(3.0, 1.0, 2.0), LevelOrdering::AdjacentSwap);
        assert_eq!(classify_ordering(2.0, 3.0, 1.0), LevelOrdering::AdjacentSwap);
        assert_eq!(classify_ordering(1.0, 2.0, 3.0), LevelOrdering::Other);
        assert_eq!(classify_ordering(1.0, 3.0, 2.0), LevelOrdering::Other);
        assert_eq!(classify_ordering(2.0, 1.0, 3.0), LevelOrdering::Other);
    }

    #[test]
    fn cohens_d_direct() {
        let a = DistanceStats::from_samples(&[1.0, 2.0, 3.0]);
        let b = DistanceStats::from_samples(&[3.0, 4.0, 5.0]);
        assert!((a.std_dev - 1.0).abs() < 1e-12);
        assert!((cohens_d(&a, &b) - 2.0).abs() < 1e-12);
        assert!((cohens_d(&b, &a) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_rank_averages_ties() {
        let d = [(0, 0.5), (1, 0.1), (2, 0.5), (3, 0.9)];
        assert_eq!(mean_rank(&d, &[1]), 1.0);
        assert_eq!(mean_rank(&d, &[0]), 2.5);
        assert_eq!(mean_rank(&d, &[3, 1]), 2.5);
    }
}


#[cfg(test)]
mod null_models {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig, DocRecord};
    use crate::encoder::EncoderError;
    use crate::link_analysis::{compute_intimacy, LinkConfig};
    use crate::retrieval::build_index;
    use crate::synth::{generate_synthetic, SynthConfig};
    use crate::corpus::TokenId;
    use std::hash::{DefaultHasher, Hash, Hasher};

    /// Embeddings that depend on the exact token sequence and nothing else.
    struct HashEncoder;

    impl Encoder for HashEncoder {
        type Trace = ();

        fn output_dim(&self) -> usize {
            16
        }

        fn encode(&self, tokens: &[TokenId]) -> Result<(Vec<f64>, ()), EncoderError> {
            let mut hasher = DefaultHasher::new();
            tokens.hash(&mut hasher);
            let mut rng = ChaCha8Rng::seed_from_u64(hasher.finish());
            Ok(((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), ()))
        }

        fn backprop(&self, _: &(), _: &[f64], _: &mut [f64]) -> Result<(), EncoderError> {
            Ok(())
        }

        fn parameters(&self) -> &[f64] {
            &[]
        }

        fn parameters_mut(&mut self) -> &mut [f64] {
            &mut []
        }
    }

    fn synthetic(n_clusters: usize) -> Corpus {
        let s = generate_synthetic(&SynthConfig { n_clusters, ..SynthConfig::default() }).unwrap();
        let config = CorpusConfig { max_seq_len: 64, stride: 64, ..CorpusConfig::default() };
        build_corpus(s.documents, &s.edges, None, &config).unwrap().0
    }

    fn index_without(corpus: &Corpus, holdout: &[(usize, usize)]) -> RetrievalIndex {
        build_index(corpus, &HashEncoder, 16, [0; 32], |d, p| holdout.contains(&(d, p))).unwrap()
    }

    #[test]
    fn content_free_embeddings_sit_near_chance() {
        let corpus = synthetic(10);
        let holdout = holdout_fragments(&corpus);
        let index = index_without(&corpus, &holdout);
        let report = self_prediction_eval(&corpus, &index, &HashEncoder, &holdout, 64, &RetrievalConfig::default()).unwrap();
        assert!(report.queries >= 200);
        assert!(report.accuracy < 5.0 * report.random_baseline, "{report:?}");
    }

    #[test]
    fn lone_document_always_predicts_itself() {
        let docs = vec![DocRecord { id: "only".into(), text: "a b c d e f g h".into() }];
        let config = CorpusConfig { max_seq_len: 4, stride: 4, ..CorpusConfig::default() };
        let corpus = build_corpus(docs, &[], None, &config).unwrap().0;
        let holdout = holdout_fragments(&corpus);
        assert_eq!(holdout, vec![(0, 2)]);
        let index = index_without(&corpus, &[]);
        let report = self_prediction_eval(&corpus, &index, &HashEncoder, &holdout, 4, &RetrievalConfig::default()).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert!(matches!(
            self_prediction_eval(&corpus, &index, &HashEncoder, &[], 4, &RetrievalConfig::default()),
            Err(EvalError::EmptyHoldout)
        ));
    }

    #[test]
    fn diagnostics_are_deterministic() {
        let corpus = synthetic(10);
        let intimacy = compute_intimacy(&corpus.adjacency, &LinkConfig::default()).unwrap();
        let index = index_without(&corpus, &[]);
        let a = separation_diagnostics(&index, &intimacy, 300, 4).unwrap();
        let b = separation_diagnostics(&index, &intimacy, 300, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.related.count, 300);
        assert!(matches!(separation_diagnostics(&index, &intimacy, 99, 4), Err(EvalError::TooFewSamples(99))));
    }

    #[test]
    fn fully_related_corpus_has_no_eligible_anchors() {
        let corpus = synthetic(10);
        let n = corpus.len();
        let intimacy = IntimacyMatrix::from_dense(n, vec![0.1; n * n]);
        let index = index_without(&corpus, &[]);
        assert!(matches!(
            separation_diagnostics(&index, &intimacy, 500, 7),
            Err(EvalError::TooFewAnchors { found: 0 })
        ));
    }
}
