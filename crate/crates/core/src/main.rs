use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use quintuplet::config::Config;
use quintuplet::corpus::{build_corpus, ingest, read_documents, Corpus, Vocabulary};
use quintuplet::encoder::MeanPoolEncoder;
use quintuplet::eval::{
    evaluate_recall, holdout_fragments, read_relevance, self_prediction_eval, separation_diagnostics,
};
use quintuplet::link_analysis::{compute_intimacy, IntimacyMatrix};
use quintuplet::retrieval::{build_index, query, IndexMeta, RetrievalConfig, RetrievalIndex};
use quintuplet::synth::{generate_synthetic, SynthConfig};
use quintuplet::training::train;

const VOCAB_FILE: &str = "vocab.json";
const CONFIG_FILE: &str = "config.toml";
const INTIMACY_FILE: &str = "intimacy.bin";

#[derive(Parser)]
#[command(name = "quintuplet", version, about = "Structure-aware document embeddings and fragment retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder on a corpus and its link graph.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every fragment of a corpus into a retrieval index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the configuration saved next to the model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Leave out the last fragment of multi-fragment documents.
        #[arg(long)]
        exclude_holdout: bool,
    },
    /// Rank documents for a free-text query.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Best fragments aggregated per document.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        omega: Option<f64>,
    },
    /// Recall@K over a relevance file, plus self-prediction when a corpus is given.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        relevance: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        k: Vec<usize>,
        /// Corpus whose last fragments serve as self-prediction queries.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Embedding-distance separation and level-ordering diagnostics.
    Diagnose {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Defaults to the intimacy cache written next to the model.
        #[arg(long)]
        intimacy: Option<PathBuf>,
    },
    /// Write a clustered synthetic corpus with edges and relevance judgments.
    Synth {
        #[arg(long, default_value_t = 200)]
        docs: usize,
        #[arg(long, default_value_t = 10)]
        clusters: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab_per_cluster: Option<usize>,
        #[arg(long)]
        shared_vocab: Option<usize>,
        #[arg(long)]
        intra_edge_prob: Option<f64>,
        #[arg(long)]
        doc_len: Option<usize>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Train {
            corpus,
            edges,
            config,
            out,
        } => cmd_train(&corpus, &edges, config.as_deref(), &out),
        Command::Index {
            corpus,
            model,
            out,
            config,
            exclude_holdout,
        } => cmd_index(&corpus, &model, &out, config.as_deref(), exclude_holdout),
        Command::Query {
            index,
            model,
            text,
            top,
            k,
            omega,
        } => cmd_query(&index, &model, &text, top, k, omega),
        Command::Eval {
            index,
            model,
            relevance,
            k,
            corpus,
        } => cmd_eval(&index, &model, &relevance, &k, corpus.as_deref()),
        Command::Diagnose {
            index,
            samples,
            seed,
            intimacy,
        } => cmd_diagnose(&index, samples, seed, intimacy.as_deref()),
        Command::Synth {
            docs,
            clusters,
            seed,
            out,
            vocab_per_cluster,
            shared_vocab,
            intra_edge_prob,
            doc_len,
        } => {
            let defaults = SynthConfig::default();
            let config = SynthConfig {
                n_docs: docs,
                n_clusters: clusters,
                seed,
                vocab_per_cluster: vocab_per_cluster.unwrap_or(defaults.vocab_per_cluster),
                shared_vocab: shared_vocab.unwrap_or(defaults.shared_vocab),
                intra_edge_prob: intra_edge_prob.unwrap_or(defaults.intra_edge_prob),
                doc_len: doc_len.unwrap_or(defaults.doc_len),
                ..defaults
            };
            let synthetic = generate_synthetic(&config)?;
            synthetic.write(&out)?;
            emit(&json!({
                "command": "synth",
                "out": out,
                "documents": synthetic.documents.len(),
                "edges": synthetic.edges.len(),
                "queries": synthetic.relevance.len(),
                "config": config,
            }))
        }
    }
}

fn emit(value: &serde_json::Value) -> Result<()> {
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{value}")?;
    Ok(())
}

fn sibling(model: &Path, name: &str) -> PathBuf {
    model.with_file_name(name)
}

fn load_config(explicit: Option<&Path>, model: Option<&Path>) -> Result<Config> {
    let saved = model.map(|m| sibling(m, CONFIG_FILE)).filter(|p| p.exists());
    match explicit.map(Path::to_path_buf).or(saved) {
        Some(path) => Ok(Config::load(&path)?),
        None => Ok(Config::default()),
    }
}

fn load_model(model: &Path) -> Result<(MeanPoolEncoder, Vocabulary)> {
    let encoder = MeanPoolEncoder::load(model).with_context(|| format!("loading {}", model.display()))?;
    let vocab_path = sibling(model, VOCAB_FILE);
    let vocab = Vocabulary::load(&vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
    if vocab.len() != encoder.vocab_size() {
        bail!(
            "vocabulary has {} entries but the model embeds {}",
            vocab.len(),
            encoder.vocab_size()
        );
    }
    Ok((encoder, vocab))
}

/// Load the intimacy matrix from the cache if it exists, otherwise compute it
/// and write the cache. Dense matrices are always read back from the cache so
/// a run that computes and a run that reuses see identical values.
fn intimacy_for(corpus: &Corpus, config: &Config, cache: &Path) -> Result<IntimacyMatrix> {
    if cache.exists() {
        let m = IntimacyMatrix::read_cache(cache)?;
        if m.dim() == corpus.len() {
            return Ok(m);
        }
        log::warn!("{} has dimension {}, recomputing", cache.display(), m.dim());
    }
    let m = compute_intimacy(&corpus.adjacency, &config.link)?;
    if !m.is_dense() {
        return Ok(m);
    }
    if let Some(dir) = cache.parent() {
        fs::create_dir_all(dir)?;
    }
    m.write_cache(cache)?;
    Ok(IntimacyMatrix::read_cache(cache)?)
}

fn cmd_train(corpus_path: &Path, edges: &Path, config_path: Option<&Path>, out: &Path) -> Result<()> {
    let config = load_config(config_path, None)?;
    let (corpus, report) = ingest(corpus_path, edges, &config.corpus)?;
    fs::create_dir_all(out)?;
    let cache = config.intimacy_cache.clone().unwrap_or_else(|| out.join(INTIMACY_FILE));
    let intimacy = intimacy_for(&corpus, &config, &cache)?;
    if cache != out.join(INTIMACY_FILE) && intimacy.is_dense() {
        intimacy.write_cache(&out.join(INTIMACY_FILE))?;
    }
    corpus.vocabulary.save(&out.join(VOCAB_FILE))?;
    fs::write(out.join(CONFIG_FILE), config.to_toml_string())?;

    let mut encoder = MeanPoolEncoder::new(corpus.vocabulary.len(), &config.encoder);
    let outcome = train(&corpus, &intimacy, &mut encoder, &config.train, &config.sampling, Some(out))?;
    let model = outcome.final_model.clone().expect("output directory given");
    let fingerprint = MeanPoolEncoder::load(&model)?.fingerprint();
    emit(&json!({
        "command": "train",
        "documents": corpus.len(),
        "fragments": corpus.total_fragments(),
        "edges": corpus.adjacency.nnz(),
        "skipped_edges": report.skipped_edges,
        "rejected_documents": report.rejected_documents,
        "steps": outcome.steps,
        "final_loss": outcome.log.last().map(|l| l.loss),
        "model": model,
        "fingerprint": hex(&fingerprint),
        "config": config,
    }))
}

fn cmd_index(corpus_path: &Path, model: &Path, out: &Path, config_path: Option<&Path>, exclude_holdout: bool) -> Result<()> {
    let config = load_config(config_path, Some(model))?;
    let (encoder, vocab) = load_model(model)?;
    let records = read_documents(corpus_path)?;
    let (corpus, _) = build_corpus(records, &[], Some(vocab), &config.corpus)?;
    let holdout: std::collections::HashSet<(usize, usize)> = if exclude_holdout {
        holdout_fragments(&corpus).into_iter().collect()
    } else {
        Default::default()
    };
    let index = build_index(
        &corpus,
        &encoder,
        config.encoder.output_dim,
        encoder.fingerprint(),
        |doc, pos| holdout.contains(&(doc, pos)),
    )?;
    index.save(out)?;
    IndexMeta {
        doc_ids: corpus.documents.iter().map(|d| d.doc_id.clone()).collect(),
        max_seq_len: config.corpus.max_seq_len,
        holdout_excluded: exclude_holdout,
        model: Some(model.to_path_buf()),
    }
    .save(out)?;
    emit(&json!({
        "command": "index",
        "out": out,
        "documents": corpus.len(),
        "entries": index.len(),
        "holdout_excluded": exclude_holdout,
        "fingerprint": hex(index.fingerprint()),
    }))
}

fn open_index(index_path: &Path, encoder: &MeanPoolEncoder) -> Result<(RetrievalIndex, IndexMeta)> {
    let index = RetrievalIndex::load(index_path)?;
    let meta = IndexMeta::load(index_path)?;
    if index.fingerprint() != &encoder.fingerprint() {
        bail!("{} was built with a different model", index_path.display());
    }
    Ok((index, meta))
}

fn cmd_query(index_path: &Path, model: &Path, text: &str, top: usize, k: Option<usize>, omega: Option<f64>) -> Result<()> {
    let config = load_config(None, Some(model))?;
    let (encoder, vocab) = load_model(model)?;
    let (index, meta) = open_index(index_path, &encoder)?;
    let retrieval = RetrievalConfig {
        top_k_fragments: k.unwrap_or(config.retrieval.top_k_fragments),
        omega: omega.unwrap_or(config.retrieval.omega),
    };
    let ranked = query(&index, &encoder, &vocab, text, meta.max_seq_len, &retrieval, top)?;
    for (rank, scored) in ranked.iter().enumerate() {
        emit(&json!({
            "rank": rank + 1,
            "doc_id": meta.doc_ids[scored.doc],
            "score": scored.score,
        }))?;
    }
    Ok(())
}

fn cmd_eval(index_path: &Path, model: &Path, relevance: &Path, ks: &[usize], corpus_path: Option<&Path>) -> Result<()> {
    let config = load_config(None, Some(model))?;
    let (encoder, vocab) = load_model(model)?;
    let (index, meta) = open_index(index_path, &encoder)?;
    let sets = read_relevance(relevance)?;
    let recall = evaluate_recall(
        &index,
        &encoder,
        &vocab,
        &meta.doc_ids,
        &sets,
        ks,
        meta.max_seq_len,
        &config.retrieval,
    )?;
    let recall_map: BTreeMap<String, f64> = recall.recall.iter().map(|(k, r)| (k.to_string(), *r)).collect();
    let self_prediction = match corpus_path {
        Some(path) => {
            if !meta.holdout_excluded {
                log::warn!("index contains the holdout fragments; self-prediction is not a held-out test");
            }
            let (corpus, _) = build_corpus(read_documents(path)?, &[], Some(vocab), &config.corpus)?;
            let holdout = holdout_fragments(&corpus);
            Some(self_prediction_eval(
                &corpus,
                &index,
                &encoder,
                &holdout,
                meta.max_seq_len,
                &config.retrieval,
            )?)
        }
        None => None,
    };
    emit(&json!({
        "command": "eval",
        "queries": recall.queries,
        "recall": recall_map,
        "self_prediction": self_prediction,
        "holdout_excluded": meta.holdout_excluded,
        "config": config.retrieval,
    }))
}

fn cmd_diagnose(index_path: &Path, samples: usize, seed: u64, intimacy: Option<&Path>) -> Result<()> {
    let index = RetrievalIndex::load(index_path)?;
    let meta = IndexMeta::load(index_path)?;
    let cache = match (intimacy, meta.model.as_deref()) {
        (Some(path), _) => path.to_path_buf(),
        (None, Some(model)) => sibling(model, INTIMACY_FILE),
        (None, None) => bail!("no intimacy matrix: pass --intimacy"),
    };
    let intimacy = IntimacyMatrix::read_cache(&cache).with_context(|| format!("loading {}", cache.display()))?;
    let report = separation_diagnostics(&index, &intimacy, samples, seed)?;
    emit(&json!({
        "command": "diagnose",
        "report": report,
        "samples": samples,
        "seed": seed,
        "intimacy": cache,
    }))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
