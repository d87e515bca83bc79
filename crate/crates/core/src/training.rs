//! Quintuplet-loss training.
//!
//! Each batch item carries four encoded branches: the anchor fragment, a
//! structural positive and negative drawn from the partition levels, and a
//! corrupted anchor fragment as the semantic positive. The semantic negative
//! is the closest other anchor in the same batch. Per item
//!
//! ```text
//! loss_struct = max(d(a, p) - d(a, n) + m_struct / level, 0)
//! loss_sem    = max(d(a, s) - d(a, hard) + m_sem, 0)
//! loss        = (1 - gamma) * loss_struct + gamma * loss_sem
//! ```
//!
//! and the batch loss is the sum over items.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, TokenId};
use crate::encoder::{distance, distance_grad, Encoder, EncoderError};
use crate::link_analysis::{rank_neighbors, IntimacyMatrix, LinkError};
use crate::pair_miner::{
    corrupt_with_vocab, partition, sample_structural, CorruptionSpec, MinerError, SamplingConfig,
    StructuralDraw,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("corpus has {corpus} documents but intimacy matrix has {intimacy}")]
    SizeMismatch { corpus: usize, intimacy: usize },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin_struct: f64,
    pub margin_sem: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Treat the mined semantic negative as a constant.
    pub stop_grad_hard_negative: bool,
    /// Withhold the last fragment of every multi-fragment document from
    /// training so it can serve as an unseen query.
    pub holdout_last_fragment: bool,
    /// Write every sampled quintuple to `quintuples.jsonl`.
    pub dump_quintuples: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin_struct: 2.0,
            margin_sem: 0.5,
            gamma: 0.5,
            learning_rate: 5e-5,
            adam_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 24,
            epochs: 1,
            seed: 7,
            checkpoint_every: 500,
            stop_grad_hard_negative: false,
            holdout_last_fragment: true,
            dump_quintuples: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TrainError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.margin_struct < 0.0 || self.margin_sem < 0.0 {
            return Err(TrainError::Config("margins must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic stream id for `(seed, a, b)`.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Quintuple sampling
// ---------------------------------------------------------------------------

/// One training item before encoding. Fragment indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Quintuple {
    pub anchor: usize,
    pub anchor_fragment: usize,
    /// Structural draw plus the fragment chosen for each side.
    pub structure: Option<(StructuralDraw, usize, usize)>,
    pub semantic_fragment: usize,
    pub corruption: CorruptionSpec,
}

/// Audit record for a sampled quintuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintupleRecord {
    pub anchor: usize,
    pub level: Option<usize>,
    pub pos: Option<usize>,
    pub neg: Option<usize>,
}

impl From<&Quintuple> for QuintupleRecord {
    fn from(q: &Quintuple) -> Self {
        Self {
            anchor: q.anchor,
            level: q.structure.map(|(d, _, _)| d.level),
            pos: q.structure.map(|(d, _, _)| d.positive),
            neg: q.structure.map(|(d, _, _)| d.negative),
        }
    }
}

/// Draws quintuples for anchors; each `(anchor, epoch)` has its own stream.
pub struct QuintupleSampler<'a> {
    pub corpus: &'a Corpus,
    pub intimacy: &'a IntimacyMatrix,
    pub sampling: &'a SamplingConfig,
    pub holdout_last_fragment: bool,
}

impl QuintupleSampler<'_> {
    /// Fragments of `doc` eligible for training.
    pub fn trainable_fragments(&self, doc: usize) -> usize {
        let s = self.corpus.documents[doc].fragment_count();
        if self.holdout_last_fragment && s > 1 {
            s - 1
        } else {
            s
        }
    }

    pub fn sample(&self, anchor: usize, epoch: usize) -> Result<Quintuple> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.sampling.seed, anchor as u64, epoch as u64));
        let row = self.intimacy.row(anchor)?;
        let ranked = rank_neighbors(&row, anchor);
        let draw = match partition(&ranked) {
            Ok(levels) => match sample_structural(&levels, &mut rng) {
                Ok(draw) => Some(draw),
                Err(MinerError::NoStructure(_)) => None,
                Err(e) => return Err(e.into()),
            },
            Err(MinerError::NoStructure(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let anchor_fragment = rng.gen_range(0..self.trainable_fragments(anchor));
        let structure = draw.map(|d| {
            let p = rng.gen_range(0..self.trainable_fragments(d.positive));
            let n = rng.gen_range(0..self.trainable_fragments(d.negative));
            (d, p, n)
        });
        let semantic_fragment = rng.gen_range(0..self.trainable_fragments(anchor));
        let source = &self.corpus.documents[anchor].fragments[semantic_fragment];
        let corruption = corrupt_with_vocab(source, &self.corpus.vocabulary, self.sampling, &mut rng)?;
        Ok(Quintuple {
            anchor,
            anchor_fragment,
            structure,
            semantic_fragment,
            corruption,
        })
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Encoded structural branch of an item.
#[derive(Debug, Clone, Copy)]
pub struct StructuralEmbeddings<'a> {
    pub positive: &'a [f64],
    pub negative: &'a [f64],
    pub level: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ItemEmbeddings<'a> {
    pub anchor: &'a [f64],
    /// `None` for anchors without structural candidates.
    pub structural: Option<StructuralEmbeddings<'a>>,
    pub semantic_positive: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemLoss {
    pub structural: f64,
    pub semantic: f64,
    pub structural_active: bool,
    pub semantic_active: bool,
    pub combined: f64,
}

fn hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Per-item structural and semantic hinge terms and their `gamma` mix.
/// A missing hard negative drops the semantic term.
pub fn quintuplet_loss(
    item: &ItemEmbeddings<'_>,
    hard_negative: Option<&[f64]>,
    config: &TrainConfig,
) -> Result<ItemLoss> {
    let structural = match item.structural {
        Some(s) => {
            let margin = config.margin_struct / s.level as f64;
            hinge(distance(item.anchor, s.positive)?, distance(item.anchor, s.negative)?, margin)
        }
        None => 0.0,
    };
    let semantic = match hard_negative {
        Some(neg) => hinge(
            distance(item.anchor, item.semantic_positive)?,
            distance(item.anchor, neg)?,
            config.margin_sem,
        ),
        None => 0.0,
    };
    Ok(ItemLoss {
        structural,
        semantic,
        structural_active: structural > 0.0,
        semantic_active: semantic > 0.0,
        combined: (1.0 - config.gamma) * structural + config.gamma * semantic,
    })
}

/// Batch position of the anchor embedding closest to `anchors[position]`,
/// skipping the item itself, other items for the same document and the
/// item's structural positive. Ties go to the earliest position.
pub fn resolve_hard_negative(
    position: usize,
    anchor_docs: &[usize],
    anchor_embeddings: &[&[f64]],
    structural_positive: Option<usize>,
) -> Option<usize> {
    let own_doc = anchor_docs[position];
    let own = anchor_embeddings[position];
    let mut best: Option<(usize, f64)> = None;
    for (j, (&doc, emb)) in anchor_docs.iter().zip(anchor_embeddings).enumerate() {
        if j == position || doc == own_doc || Some(doc) == structural_positive {
            continue;
        }
        let d = distance(own, emb).expect("batch embeddings share a dimension");
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub loss_struct: f64,
    pub loss_sem: f64,
    pub gamma: f64,
    pub structural_active: Vec<bool>,
    pub semantic_active: Vec<bool>,
    /// Items that had a structural pair.
    pub structural_items: usize,
    /// Items whose semantic term was skipped for lack of a hard negative.
    pub semantic_skipped: usize,
}

impl LossReport {
    pub fn active_struct_frac(&self) -> f64 {
        if self.structural_items == 0 {
            0.0
        } else {
            self.structural_active.iter().filter(|&&a| a).count() as f64 / self.structural_items as f64
        }
    }
}

struct Branch<T> {
    h: Vec<f64>,
    trace: T,
}

struct EncodedItem<T> {
    doc: usize,
    anchor: Branch<T>,
    structural: Option<(Branch<T>, Branch<T>, usize, usize)>,
    semantic: Branch<T>,
}

fn encode_branch<E: Encoder>(encoder: &E, tokens: &[TokenId]) -> Result<Branch<E::Trace>> {
    let (h, trace) = encoder.encode(tokens)?;
    Ok(Branch { h, trace })
}

fn encode_item<E: Encoder>(encoder: &E, corpus: &Corpus, q: &Quintuple) -> Result<EncodedItem<E::Trace>> {
    let fragment = |doc: usize, frag: usize| corpus.documents[doc].fragments[frag].tokens.as_slice();
    let anchor = encode_branch(encoder, fragment(q.anchor, q.anchor_fragment))?;
    let structural = match q.structure {
        Some((draw, pf, nf)) => Some((
            encode_branch(encoder, fragment(draw.positive, pf))?,
            encode_branch(encoder, fragment(draw.negative, nf))?,
            draw.level,
            draw.positive,
        )),
        None => None,
    };
    let corrupted = q.corruption.apply(fragment(q.anchor, q.semantic_fragment));
    let semantic = encode_branch(encoder, &corrupted)?;
    Ok(EncodedItem {
        doc: q.anchor,
        anchor,
        structural,
        semantic,
    })
}

fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Loss of a batch and its gradient with respect to every encoder parameter.
pub fn batch_loss_and_grad<E: Encoder>(
    encoder: &E,
    batch: &[Quintuple],
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(LossReport, Vec<f64>)> {
    let items: Vec<EncodedItem<E::Trace>> = batch
        .par_iter()
        .map(|q| encode_item(encoder, corpus, q))
        .collect::<Result<_>>()?;

    let docs: Vec<usize> = items.iter().map(|it| it.doc).collect();
    let anchors: Vec<&[f64]> = items.iter().map(|it| it.anchor.h.as_slice()).collect();
    let dim = encoder.output_dim();
    let gamma = config.gamma;

    // Upstream gradients per branch: anchor, positive, negative, semantic.
    let mut grad_anchor = vec![vec![0.0; dim]; items.len()];
    let mut grad_branches: Vec<[Vec<f64>; 3]> =
        (0..items.len()).map(|_| [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]]).collect();

    let mut report = LossReport {
        loss: 0.0,
        loss_struct: 0.0,
        loss_sem: 0.0,
        gamma,
        structural_active: Vec::with_capacity(items.len()),
        semantic_active: Vec::with_capacity(items.len()),
        structural_items: 0,
        semantic_skipped: 0,
    };

    for (i, item) in items.iter().enumerate() {
        let struct_pos_doc = item.structural.as_ref().map(|s| s.3);
        let hard = if items.len() >= 2 {
            resolve_hard_negative(i, &docs, &anchors, struct_pos_doc)
        } else {
            None
        };
        if hard.is_none() {
            report.semantic_skipped += 1;
        }
        let embeddings = ItemEmbeddings {
            anchor: &item.anchor.h,
            structural: item.structural.as_ref().map(|(p, n, level, _)| StructuralEmbeddings {
                positive: &p.h,
                negative: &n.h,
                level: *level,
            }),
            semantic_positive: &item.semantic.h,
        };
        let loss = quintuplet_loss(&embeddings, hard.map(|j| anchors[j]), config)?;
        report.loss_struct += loss.structural;
        report.loss_sem += loss.semantic;
        report.loss += loss.combined;
        report.structural_items += usize::from(item.structural.is_some());
        report.structural_active.push(loss.structural_active);
        report.semantic_active.push(loss.semantic_active);

        let a = &item.anchor.h;
        if let (true, Some((p, n, _, _))) = (loss.structural_active, &item.structural) {
            let w = 1.0 - gamma;
            let (dp, dn) = (distance(a, &p.h)?, distance(a, &n.h)?);
            let gp = distance_grad(a, &p.h, dp);
            let gn = distance_grad(a, &n.h, dn);
            axpy(&mut grad_anchor[i], w, &gp);
            axpy(&mut grad_anchor[i], -w, &gn);
            axpy(&mut grad_branches[i][0], -w, &gp);
            axpy(&mut grad_branches[i][1], w, &gn);
        }
        if let (true, Some(j)) = (loss.semantic_active, hard) {
            let w = gamma;
            let s = &item.semantic.h;
            let (ds, dh) = (distance(a, s)?, distance(a, anchors[j])?);
            let gs = distance_grad(a, s, ds);
            let gh = distance_grad(a, anchors[j], dh);
            axpy(&mut grad_anchor[i], w, &gs);
            axpy(&mut grad_anchor[i], -w, &gh);
            axpy(&mut grad_branches[i][2], -w, &gs);
            if !config.stop_grad_hard_negative {
                axpy(&mut grad_anchor[j], w, &gh);
            }
        }
    }

    let mut grads = vec![0.0; encoder.parameters().len()];
    for (i, item) in items.iter().enumerate() {
        encoder.backprop(&item.anchor.trace, &grad_anchor[i], &mut grads)?;
        if let Some((p, n, _, _)) = &item.structural {
            encoder.backprop(&p.trace, &grad_branches[i][0], &mut grads)?;
            encoder.backprop(&n.trace, &grad_branches[i][1], &mut grads)?;
        }
        encoder.backprop(&item.semantic.trace, &grad_branches[i][2], &mut grads)?;
    }
    Ok((report, grads))
}

/// Minimal Adam state shared across steps.
pub use crate::optim::Adam;

pub fn new_optimizer<E: Encoder>(encoder: &E, config: &TrainConfig) -> Adam {
    Adam::new(
        encoder.parameters().len(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    )
}

/// Forward, backward and one Adam update.
pub fn train_step<E: Encoder>(
    encoder: &mut E,
    optimizer: &mut Adam,
    batch: &[Quintuple],
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<LossReport> {
    let (report, grads) = batch_loss_and_grad(encoder, batch, corpus, config)?;
    if !report.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite {
            step: optimizer.steps() as usize + 1,
            detail: format!(
                "loss={} struct={} sem={} anchors={:?}",
                report.loss,
                report.loss_struct,
                report.loss_sem,
                batch.iter().map(|q| q.anchor).collect::<Vec<_>>()
            ),
        });
    }
    optimizer.step(encoder.parameters_mut(), &grads);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub loss_struct: f64,
    pub loss_sem: f64,
    pub active_struct_frac: f64,
}

/// Persists an encoder so the loop can checkpoint it.
pub trait SaveModel {
    fn save_model(&self, path: &Path) -> std::io::Result<()>;
}

impl SaveModel for crate::encoder::MeanPoolEncoder {
    fn save_model(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_checkpoint_bytes())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub steps: usize,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub final_model: Option<PathBuf>,
}

/// Number of optimizer steps one epoch takes for `n_docs` anchors.
pub fn steps_per_epoch(n_docs: usize, batch_size: usize) -> usize {
    let full = n_docs / batch_size;
    full + usize::from(n_docs % batch_size >= 2)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Train for `config.epochs` epochs. With an output directory, writes
/// `train_log.jsonl`, periodic checkpoints and `model.bin`.
pub fn train<E: Encoder + SaveModel>(
    corpus: &Corpus,
    intimacy: &IntimacyMatrix,
    encoder: &mut E,
    config: &TrainConfig,
    sampling: &SamplingConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if intimacy.dim() != corpus.len() {
        return Err(TrainError::SizeMismatch {
            corpus: corpus.len(),
            intimacy: intimacy.dim(),
        });
    }
    let sampler = QuintupleSampler {
        corpus,
        intimacy,
        sampling,
        holdout_last_fragment: config.holdout_last_fragment,
    };
    let mut optimizer = new_optimizer(encoder, config);
    let mut outcome = TrainOutcome::default();

    let mut log_writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("train_log.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(io_err(&path))?))
        }
        None => None,
    };
    let mut dump_writer = match (out_dir, config.dump_quintuples) {
        (Some(dir), true) => {
            let path = dir.join("quintuples.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(io_err(&path))?))
        }
        _ => None,
    };
    let checkpoint = |encoder: &E, name: String, outcome: &mut TrainOutcome| -> Result<()> {
        if let Some(dir) = out_dir {
            let path = dir.join(name);
            encoder.save_model(&path).map_err(io_err(&path))?;
            outcome.checkpoints.push(path);
        }
        Ok(())
    };

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u64::MAX, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Quintuple> = chunk
                .iter()
                .map(|&anchor| sampler.sample(anchor, epoch))
                .collect::<Result<_>>()?;
            if let Some(w) = dump_writer.as_mut() {
                for q in &batch {
                    let line = serde_json::to_string(&QuintupleRecord::from(q)).expect("record serializes");
                    writeln!(w, "{line}").map_err(io_err(Path::new("quintuples.jsonl")))?;
                }
            }
            let report = match train_step(encoder, &mut optimizer, &batch, corpus, config) {
                Ok(report) => report,
                Err(err @ TrainError::NonFinite { .. }) => {
                    if let Some(dir) = out_dir {
                        let path = dir.join("nonfinite_dump.txt");
                        let _ = fs::write(&path, format!("{err}\n{batch:#?}\n"));
                    }
                    return Err(err);
                }
                Err(err) => return Err(err),
            };
            outcome.steps += 1;
            let entry = StepLog {
                step: outcome.steps,
                loss: report.loss,
                loss_struct: report.loss_struct,
                loss_sem: report.loss_sem,
                active_struct_frac: report.active_struct_frac(),
            };
            if let Some(w) = log_writer.as_mut() {
                let line = serde_json::to_string(&entry).expect("log entry serializes");
                writeln!(w, "{line}").map_err(io_err(Path::new("train_log.jsonl")))?;
            }
            log::debug!("step {} loss {:.6}", entry.step, entry.loss);
            outcome.log.push(entry);
            if config.checkpoint_every > 0 && outcome.steps % config.checkpoint_every == 0 {
                checkpoint(encoder, format!("checkpoint-step{:06}.bin", outcome.steps), &mut outcome)?;
            }
        }
        checkpoint(encoder, format!("checkpoint-epoch{:03}.bin", epoch + 1), &mut outcome)?;
    }

    if let Some(w) = log_writer.as_mut() {
        w.flush().map_err(io_err(Path::new("train_log.jsonl")))?;
    }
    if let Some(w) = dump_writer.as_mut() {
        w.flush().map_err(io_err(Path::new("quintuples.jsonl")))?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("model.bin");
        encoder.save_model(&path).map_err(io_err(&path))?;
        outcome.final_model = Some(path);
    }
    Ok(outcome)
}
