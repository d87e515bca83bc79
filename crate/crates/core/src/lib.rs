//! Structure-aware document embeddings.
//!
//! A citation or hyperlink graph is turned into an intimacy matrix by damped
//! link analysis. Ranked neighbors of every document are halved recursively
//! into levels, and each level yields a structural positive/negative pair
//! whose required margin shrinks as the pair gets structurally closer. A
//! masked copy of the anchor fragment and the hardest in-batch anchor add a
//! semantic positive/negative pair. The resulting quintuplet loss trains a
//! fragment encoder, and documents are retrieved by aggregating the best
//! fragment similarities.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod link_analysis;
pub mod optim;
pub mod pair_miner;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use config::Config;
pub use corpus::{Corpus, CorpusConfig, Vocabulary};
pub use encoder::{Encoder, EncoderConfig, MeanPoolEncoder};
pub use link_analysis::{compute_intimacy, IntimacyMatrix, LinkConfig};
pub use pair_miner::SamplingConfig;
pub use retrieval::{RetrievalConfig, RetrievalIndex};
pub use training::{train, TrainConfig};
