//! Structural and semantic pair construction.
//!
//! The ranked neighbor sequence of an anchor is halved repeatedly. Level 1
//! contrasts every connected document with every unconnected one; each
//! further level keeps the stronger half of the previous positive range as
//! positives and uses the weaker half as negatives, so deeper levels yield
//! harder triples. The terminal level pairs the single strongest neighbor
//! with the block that follows it.

use std::ops::RangeInclusive;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Fragment, TokenId, Vocabulary, MASK_ID, RESERVED_IDS};
use crate::link_analysis::RankedNeighbors;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MinerError {
    #[error("document {0} has no structural candidates")]
    NoStructure(usize),
    #[error("cannot corrupt an empty fragment")]
    EmptyFragment,
    #[error("vocabulary has no non-reserved tokens")]
    EmptyVocabulary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub corruption_rate: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            corruption_rate: 0.25,
            mask_prob: 0.5,
            seed: 7,
        }
    }
}

/// Candidate ranges for one level, as 1-based inclusive positions into the
/// ranked neighbor order. An empty range is `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    pub positives: RangeInclusive<usize>,
    pub negatives: Option<RangeInclusive<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionLevels {
    pub anchor: usize,
    /// Ranked neighbors, strongest connection first.
    pub order: Vec<usize>,
    pub n_connected: usize,
    /// `levels[l - 1]` holds level `l`.
    pub levels: Vec<Level>,
}

impl PartitionLevels {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Levels (1-based) with both candidate sets non-empty.
    pub fn valid_levels(&self) -> Vec<usize> {
        self.levels
            .iter()
            .enumerate()
            .filter(|(_, lvl)| lvl.negatives.is_some())
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Document at 1-based `position` of the ranked order.
    pub fn at(&self, position: usize) -> usize {
        self.order[position - 1]
    }
}

fn ceil_div_pow2(n: usize, shift: usize) -> usize {
    n.div_ceil(1 << shift)
}

fn non_empty(start: usize, end: usize) -> Option<RangeInclusive<usize>> {
    (start <= end).then_some(start..=end)
}

/// Recursive halving of the connected prefix of `ranked`.
pub fn partition(ranked: &RankedNeighbors) -> Result<PartitionLevels, MinerError> {
    let n = ranked.n_connected;
    if n == 0 {
        return Err(MinerError::NoStructure(ranked.anchor));
    }
    let total = ranked.order.len();
    let level_count = n.ilog2() as usize + 1;
    let mut levels = Vec::with_capacity(level_count);
    for l in 1..=level_count {
        let level = if l == 1 {
            Level {
                positives: 1..=n,
                negatives: non_empty(n + 1, total),
            }
        } else if l < level_count {
            let cut = ceil_div_pow2(n, l - 1);
            Level {
                positives: 1..=cut,
                negatives: non_empty(cut + 1, ceil_div_pow2(n, l - 2)),
            }
        } else {
            Level {
                positives: 1..=1,
                negatives: non_empty(2, ceil_div_pow2(n, l - 2)),
            }
        };
        levels.push(level);
    }
    Ok(PartitionLevels {
        anchor: ranked.anchor,
        order: ranked.order.clone(),
        n_connected: n,
        levels,
    })
}

/// A sampled structural positive/negative pair and the level it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralDraw {
    pub level: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Uniform level among the valid ones, then uniform candidates inside it.
pub fn sample_structural<R: Rng + ?Sized>(
    partition: &PartitionLevels,
    rng: &mut R,
) -> Result<StructuralDraw, MinerError> {
    let valid = partition.valid_levels();
    if valid.is_empty() {
        return Err(MinerError::NoStructure(partition.anchor));
    }
    let level = valid[rng.gen_range(0..valid.len())];
    let lvl = &partition.levels[level - 1];
    let negatives = lvl.negatives.clone().expect("valid level has negatives");
    let positive = partition.at(rng.gen_range(lvl.positives.clone()));
    let negative = partition.at(rng.gen_range(negatives));
    Ok(StructuralDraw {
        level,
        positive,
        negative,
    })
}

/// Planned token replacements that turn an anchor fragment into its
/// semantic positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionSpec {
    /// Indices into the fragment's token sequence, ascending.
    pub positions: Vec<usize>,
    pub replacements: Vec<TokenId>,
}

impl CorruptionSpec {
    pub fn apply(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        let mut out = tokens.to_vec();
        for (&pos, &id) in self.positions.iter().zip(&self.replacements) {
            out[pos] = id;
        }
        out
    }
}

/// Replace `round(rate * len)` distinct positions, each with `[MASK]` with
/// probability `mask_prob` and otherwise with a uniform non-reserved token.
pub fn corrupt<R: Rng + ?Sized>(
    fragment: &Fragment,
    vocab_len: usize,
    rate: f64,
    mask_prob: f64,
    rng: &mut R,
) -> Result<CorruptionSpec, MinerError> {
    let len = fragment.tokens.len();
    if len == 0 {
        return Err(MinerError::EmptyFragment);
    }
    let count = ((rate * len as f64).round() as usize).min(len);
    if count > 0 && vocab_len <= RESERVED_IDS as usize {
        return Err(MinerError::EmptyVocabulary);
    }
    let mut positions = sample_indices(rng, len, count).into_vec();
    positions.sort_unstable();
    let replacements = positions
        .iter()
        .map(|_| {
            if rng.gen_bool(mask_prob) {
                MASK_ID
            } else {
                rng.gen_range(RESERVED_IDS..vocab_len as TokenId)
            }
        })
        .collect();
    Ok(CorruptionSpec {
        positions,
        replacements,
    })
}

/// Same as [`corrupt`], drawing replacement tokens from `vocab`.
pub fn corrupt_with_vocab<R: Rng + ?Sized>(
    fragment: &Fragment,
    vocab: &Vocabulary,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<CorruptionSpec, MinerError> {
    corrupt(fragment, vocab.len(), config.corruption_rate, config.mask_prob, rng)
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn levels(n: usize, extra: usize) -> PartitionLevels {
        partition(&RankedNeighbors {
            anchor: 0,
            order: (1..=n + extra).collect(),
            n_connected: n,
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn positives_nest_and_negatives_tile(n in 1usize..300, extra in 0usize..100) {
            let p = levels(n, extra);
            prop_assert_eq!(p.level_count(), (n as f64).log2().floor() as usize + 1);
            for w in p.levels.windows(2) {
                prop_assert!(w[1].positives.start() == w[0].positives.start() && w[1].positives.end() <= w[0].positives.end());
            }
            let mut hits = vec![0; n + 1];
            hits[1] += 1;
            for level in &p.levels[1..] {
                for pos in level.negatives.clone().into_iter().flatten() {
                    prop_assert!(!level.positives.contains(&pos));
                    hits[pos] += 1;
                }
            }
            prop_assert!(hits[1..].iter().all(|&h| h == 1));
            prop_assert_eq!(p.levels.last().unwrap().positives.clone(), 1..=1);
        }

        #[test]
        fn every_candidate_is_reachable(n in 1usize..24, extra in 0usize..16, seed in any::<u64>()) {
            let p = levels(n, extra);
            prop_assume!(!p.valid_levels().is_empty());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen = HashSet::new();
            for _ in 0..6000 {
                let d = sample_structural(&p, &mut rng).unwrap();
                seen.insert((d.level, true, d.positive));
                seen.insert((d.level, false, d.negative));
            }
            let mut expected = HashSet::new();
            for l in p.valid_levels() {
                let level = &p.levels[l - 1];
                expected.extend(level.positives.clone().map(|q| (l, true, p.at(q))));
                expected.extend(level.negatives.clone().unwrap().map(|q| (l, false, p.at(q))));
            }
            prop_assert_eq!(seen, expected);
        }

        #[test]
        fn corruption_keeps_length_and_vocabulary(
            tokens in prop::collection::vec(RESERVED_IDS..60, 1..200),
            vocab_len in 4usize..60,
            rate in 0.0f64..1.0,
            mask_prob in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let fragment = Fragment { tokens: tokens.clone(), position: 1 };
            let spec = corrupt(&fragment, vocab_len, rate, mask_prob, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let out = spec.apply(&tokens);
            prop_assert_eq!(out.len(), tokens.len());
            prop_assert_eq!(spec.positions.len(), (rate * tokens.len() as f64).round() as usize);
            prop_assert!(spec.positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(spec.replacements.iter().all(|&t| t == MASK_ID || (RESERVED_IDS..vocab_len as TokenId).contains(&t)));
            for (i, (&a, &b)) in tokens.iter().zip(&out).enumerate() {
                prop_assert!(a == b || spec.positions.binary_search(&i).is_ok());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// With unconnected documents present every level is valid, so a
        /// negative is a connected document with probability (L - 1) / L.
        #[test]
        fn deeper_levels_get_their_share(n in 1usize..200, seed in any::<u64>()) {
            let p = levels(n, 5);
            let l = p.level_count() as f64;
            prop_assert_eq!(p.valid_levels().len(), p.level_count());
            let draws = 4000;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let deep = (0..draws).filter(|_| sample_structural(&p, &mut rng).unwrap().level >= 2).count();
            let expected = (l - 1.0) / l;
            let sigma = (expected * (1.0 - expected) / draws as f64).sqrt();
            prop_assert!((deep as f64 / draws as f64 - expected).abs() <= 5.0 * sigma + 1e-12);
        }
    }
}
