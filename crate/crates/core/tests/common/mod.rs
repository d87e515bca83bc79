#![allow(dead_code)]

use std::path::{Path, PathBuf};

use quintuplet::config::Config;
use quintuplet::corpus::{build_corpus, AdjacencyMatrix, Corpus};
use quintuplet::encoder::MeanPoolEncoder;
use quintuplet::link_analysis::{compute_intimacy, IntimacyMatrix};
use quintuplet::synth::{generate_synthetic, SynthConfig, SyntheticCorpus};
use quintuplet::training::train;
use rand::Rng;

pub fn synthetic_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")
}

pub fn synthetic_config() -> Config {
    Config::load(&synthetic_config_path()).expect("bundled config parses")
}

/// Random graph with independent directed edges of the given probability.
pub fn random_graph<R: Rng>(n: usize, p: f64, rng: &mut R) -> AdjacencyMatrix {
    let mut a = AdjacencyMatrix::new(n);
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.gen_bool(p) {
                a.insert(i, j, rng.gen_range(0.5..2.0)).unwrap();
            }
        }
    }
    a
}

/// `alpha * (I - (1 - alpha) A')^{-1}` by Gauss-Jordan elimination with
/// partial pivoting, normalizing columns directly from the raw entries.
pub fn intimacy_oracle(a: &AdjacencyMatrix, alpha: f64) -> Vec<f64> {
    let n = a.dim();
    let mut raw = vec![0.0; n * n];
    for (i, j, w) in a.iter() {
        raw[i * n + j] = w;
    }
    let mut m = vec![0.0; n * 2 * n];
    let w = 2 * n;
    for j in 0..n {
        let col_sum: f64 = (0..n).map(|i| raw[i * n + j]).sum();
        for i in 0..n {
            let normalized = if col_sum > 0.0 { raw[i * n + j] / col_sum } else { 0.0 };
            m[i * w + j] = f64::from(u8::from(i == j)) - (1.0 - alpha) * normalized;
        }
        m[j * w + n + j] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * w + col].abs().total_cmp(&m[y * w + col].abs()))
            .unwrap();
        for k in 0..w {
            m.swap(col * w + k, pivot * w + k);
        }
        let p = m[col * w + col];
        for k in 0..w {
            m[col * w + k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * w + col];
                if f != 0.0 {
                    for k in 0..w {
                        m[r * w + k] -= f * m[col * w + k];
                    }
                }
            }
        }
    }
    (0..n * n).map(|idx| alpha * m[(idx / n) * w + n + idx % n]).collect()
}

/// Round every intimacy value to `f32`, as a cache round trip does.
pub fn quantized(m: &IntimacyMatrix) -> IntimacyMatrix {
    let n = m.dim();
    let mut values = Vec::with_capacity(n * n);
    for i in 0..n {
        values.extend(m.row(i).unwrap().iter().map(|&v| v as f32 as f64));
    }
    IntimacyMatrix::from_dense(n, values)
}

/// Synthetic corpus ingested with the bundled configuration.
pub struct SyntheticSetup {
    pub config: Config,
    pub synthetic: SyntheticCorpus,
    pub corpus: Corpus,
    pub intimacy: IntimacyMatrix,
}

pub fn synthetic_setup(synth: &SynthConfig) -> SyntheticSetup {
    let config = synthetic_config();
    let synthetic = generate_synthetic(synth).unwrap();
    let (corpus, report) = build_corpus(synthetic.documents.clone(), &synthetic.edges, None, &config.corpus).unwrap();
    assert_eq!(report.skipped_edges + report.rejected_documents, 0);
    let intimacy = quantized(&compute_intimacy(&corpus.adjacency, &config.link).unwrap());
    SyntheticSetup {
        config,
        synthetic,
        corpus,
        intimacy,
    }
}

impl SyntheticSetup {
    pub fn untrained(&self, seed: u64) -> MeanPoolEncoder {
        let cfg = quintuplet::encoder::EncoderConfig {
            seed,
            ..self.config.encoder.clone()
        };
        let mut encoder = MeanPoolEncoder::new(self.corpus.vocabulary.len(), &cfg);
        encoder.quantize();
        encoder
    }

    /// Train with the bundled settings, overriding `gamma` and the seeds, and
    /// return the model as persisted.
    pub fn trained(&self, gamma: f64, seed: u64) -> MeanPoolEncoder {
        let mut encoder = self.untrained(seed);
        let train_cfg = quintuplet::training::TrainConfig {
            gamma,
            seed,
            ..self.config.train.clone()
        };
        let sampling = quintuplet::pair_miner::SamplingConfig {
            seed,
            ..self.config.sampling.clone()
        };
        train(&self.corpus, &self.intimacy, &mut encoder, &train_cfg, &sampling, None).unwrap();
        MeanPoolEncoder::from_checkpoint_bytes(&encoder.to_checkpoint_bytes()).unwrap()
    }
}
