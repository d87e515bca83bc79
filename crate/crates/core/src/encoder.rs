//! Text encoders mapping a token sequence to a fixed-length embedding.
//!
//! Training only sees an encoder through [`Encoder`]: a forward pass that
//! returns the embedding together with a trace, and a backward pass that
//! turns `dL/dh` into parameter gradients. [`MeanPoolEncoder`] is the
//! reference implementation: embedding lookup, mean pooling, a dense
//! projection and `tanh`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::TokenId;

const CHECKPOINT_MAGIC: [u8; 4] = *b"QCKP";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot encode an empty token sequence")]
    EmptyInput,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

/// Shape and initialization of the reference encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub token_dim: usize,
    pub output_dim: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            output_dim: 128,
            init_scale: 0.05,
            seed: 7,
        }
    }
}

/// A differentiable map from tokens to `R^E` with flat parameter storage.
pub trait Encoder: Sync {
    type Trace: Send + Sync;

    fn output_dim(&self) -> usize;

    fn encode(&self, tokens: &[TokenId]) -> Result<(Vec<f64>, Self::Trace)>;

    /// Accumulate the gradient of `h . grad_h` into `grads`, laid out like
    /// [`Encoder::parameters`].
    fn backprop(&self, trace: &Self::Trace, grad_h: &[f64], grads: &mut [f64]) -> Result<()>;

    fn parameters(&self) -> &[f64];

    fn parameters_mut(&mut self) -> &mut [f64];
}

/// Everything needed to replay and differentiate one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeTrace {
    pub tokens: Vec<TokenId>,
    pub pooled: Vec<f64>,
    pub output: Vec<f64>,
}

/// `h = tanh(W^T mean(embed(tokens)) + b)`.
///
/// Parameters live in one buffer: the `V x D` embedding table (row-major),
/// the `D x E` projection (row-major), then the `E` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPoolEncoder {
    vocab_size: usize,
    token_dim: usize,
    output_dim: usize,
    seed: u64,
    params: Vec<f64>,
}

impl MeanPoolEncoder {
    /// Uniform initialization in `[-init_scale, init_scale]`.
    pub fn new(vocab_size: usize, config: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let len = Self::param_len(vocab_size, config.token_dim, config.output_dim);
        let scale = config.init_scale;
        let params = (0..len).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self {
            vocab_size,
            token_dim: config.token_dim,
            output_dim: config.output_dim,
            seed: config.seed,
            params,
        }
    }

    pub fn zeros(vocab_size: usize, token_dim: usize, output_dim: usize) -> Self {
        Self {
            vocab_size,
            token_dim,
            output_dim,
            seed: 0,
            params: vec![0.0; Self::param_len(vocab_size, token_dim, output_dim)],
        }
    }

    fn param_len(v: usize, d: usize, e: usize) -> usize {
        v * d + d * e + e
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn projection_offset(&self) -> usize {
        self.vocab_size * self.token_dim
    }

    fn bias_offset(&self) -> usize {
        self.projection_offset() + self.token_dim * self.output_dim
    }

    pub fn embedding_row(&self, token: TokenId) -> &[f64] {
        let start = token as usize * self.token_dim;
        &self.params[start..start + self.token_dim]
    }

    pub fn embedding_row_mut(&mut self, token: TokenId) -> &mut [f64] {
        let start = token as usize * self.token_dim;
        &mut self.params[start..start + self.token_dim]
    }

    /// Row-major `D x E`.
    pub fn projection(&self) -> &[f64] {
        &self.params[self.projection_offset()..self.bias_offset()]
    }

    pub fn projection_mut(&mut self) -> &mut [f64] {
        let (start, end) = (self.projection_offset(), self.bias_offset());
        &mut self.params[start..end]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.bias_offset()..]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let start = self.bias_offset();
        &mut self.params[start..]
    }

    /// Slice of a gradient buffer holding the embedding row of `token`.
    pub fn embedding_grad<'g>(&self, grads: &'g [f64], token: TokenId) -> &'g [f64] {
        let start = token as usize * self.token_dim;
        &grads[start..start + self.token_dim]
    }

    /// Serialize as a checkpoint: header, then `f32` embedding, projection
    /// and bias blocks, all little-endian.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.params.len());
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.token_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.output_dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for &p in &self.params {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| EncoderError::Checkpoint(msg.to_string());
        if bytes.len() < HEADER_LEN || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(EncoderError::Checkpoint(format!("unsupported version {version}")));
        }
        let (v, d, e) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        if d == 0 || e == 0 {
            return Err(bad("zero dimension"));
        }
        let seed = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
        let body = &bytes[HEADER_LEN..];
        let expected = Self::param_len(v, d, e);
        if body.len() != 4 * expected {
            return Err(EncoderError::Checkpoint(format!(
                "expected {} parameters, found {} bytes",
                expected,
                body.len()
            )));
        }
        let params: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(Self {
            vocab_size: v,
            token_dim: d,
            output_dim: e,
            seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }

    /// Round every parameter to `f32`, matching what a checkpoint stores.
    pub fn quantize(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_checkpoint_bytes()).into()
    }
}

impl Encoder for MeanPoolEncoder {
    type Trace = EncodeTrace;

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn encode(&self, tokens: &[TokenId]) -> Result<(Vec<f64>, EncodeTrace)> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyInput);
        }
        let d = self.token_dim;
        let mut pooled = vec![0.0; d];
        for &t in tokens {
            if t as usize >= self.vocab_size {
                return Err(EncoderError::TokenOutOfRange {
                    id: t,
                    vocab: self.vocab_size,
                });
            }
            for (acc, w) in pooled.iter_mut().zip(self.embedding_row(t)) {
                *acc += w;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);

        let projection = self.projection();
        let mut output = self.bias().to_vec();
        for (k, &p) in pooled.iter().enumerate() {
            let row = &projection[k * self.output_dim..(k + 1) * self.output_dim];
            for (o, w) in output.iter_mut().zip(row) {
                *o += p * w;
            }
        }
        output.iter_mut().for_each(|o| *o = o.tanh());
        let trace = EncodeTrace {
            tokens: tokens.to_vec(),
            pooled,
            output: output.clone(),
        };
        Ok((output, trace))
    }

    fn backprop(&self, trace: &EncodeTrace, grad_h: &[f64], grads: &mut [f64]) -> Result<()> {
        if grad_h.len() != self.output_dim {
            return Err(EncoderError::DimensionMismatch {
                expected: self.output_dim,
                actual: grad_h.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(EncoderError::DimensionMismatch {
                expected: self.params.len(),
                actual: grads.len(),
            });
        }
        if trace.pooled.len() != self.token_dim || trace.output.len() != self.output_dim {
            return Err(EncoderError::DimensionMismatch {
                expected: self.token_dim,
                actual: trace.pooled.len(),
            });
        }
        let e = self.output_dim;
        let d = self.token_dim;
        let grad_pre: Vec<f64> = grad_h
            .iter()
            .zip(&trace.output)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        if grad_pre.iter().all(|&g| g == 0.0) {
            return Ok(());
        }

        let (proj_off, bias_off) = (self.projection_offset(), self.bias_offset());
        for (slot, g) in grads[bias_off..].iter_mut().zip(&grad_pre) {
            *slot += g;
        }
        let projection = self.projection();
        let mut grad_pooled = vec![0.0; d];
        for k in 0..d {
            let row = &projection[k * e..(k + 1) * e];
            let grad_row = &mut grads[proj_off + k * e..proj_off + (k + 1) * e];
            let p = trace.pooled[k];
            let mut acc = 0.0;
            for ((gw, w), g) in grad_row.iter_mut().zip(row).zip(&grad_pre) {
                *gw += p * g;
                acc += w * g;
            }
            grad_pooled[k] = acc;
        }
        let inv = 1.0 / trace.tokens.len() as f64;
        for &t in &trace.tokens {
            let start = t as usize * d;
            for (slot, g) in grads[start..start + d].iter_mut().zip(&grad_pooled) {
                *slot += g * inv;
            }
        }
        Ok(())
    }

    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

/// Euclidean distance.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EncoderError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Gradient of `distance(a, b)` with respect to `a`; zero when `a == b`.
pub fn distance_grad(a: &[f64], b: &[f64], dist: f64) -> Vec<f64> {
    if dist > 0.0 {
        a.iter().zip(b).map(|(x, y)| (x - y) / dist).collect()
    } else {
        vec![0.0; a.len()]
    }
}

/// Cosine similarity.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EncoderError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EncoderError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    const V: usize = 10;
    const D: usize = 4;
    const E: usize = 3;

    fn encoder(seed: u64) -> MeanPoolEncoder {
        MeanPoolEncoder::new(
            V,
            &EncoderConfig {
                token_dim: D,
                output_dim: E,
                init_scale: 0.8,
                seed,
            },
        )
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    proptest! {
        #[test]
        fn backprop_matches_central_differences(
            seed in any::<u64>(),
            tokens in prop::collection::vec(0u32..V as u32, 1..12),
            upstream in prop::collection::vec(-1.0f64..1.0, E),
        ) {
            let mut enc = encoder(seed);
            let objective = |enc: &MeanPoolEncoder| {
                let (h, _) = enc.encode(&tokens).unwrap();
                h.iter().zip(&upstream).map(|(x, g)| x * g).sum::<f64>()
            };
            let (_, trace) = enc.encode(&tokens).unwrap();
            let mut grads = vec![0.0; enc.parameters().len()];
            enc.backprop(&trace, &upstream, &mut grads).unwrap();
            let blocks = [("embedding", 0..V * D), ("projection", V * D..V * D + D * E), ("bias", V * D + D * E..grads.len())];
            let eps = 1e-6;
            for (name, block) in blocks {
                for k in block {
                    let x = enc.parameters()[k];
                    enc.parameters_mut()[k] = x + eps;
                    let up = objective(&enc);
                    enc.parameters_mut()[k] = x - eps;
                    let down = objective(&enc);
                    enc.parameters_mut()[k] = x;
                    let numeric = (up - down) / (2.0 * eps);
                    prop_assert!(relative_error(grads[k], numeric) < 1e-4, "{name}[{k}]: {} vs {numeric}", grads[k]);
                }
            }
        }

        #[test]
        fn outputs_are_bounded_and_pure(seed in any::<u64>(), tokens in prop::collection::vec(0u32..V as u32, 1..30)) {
            let enc = encoder(seed);
            let (h, _) = enc.encode(&tokens).unwrap();
            let (again, _) = enc.encode(&tokens).unwrap();
            prop_assert!(h.iter().all(|x| x.abs() < 1.0));
            prop_assert_eq!(h, again);
        }

        #[test]
        fn embedding_gradient_only_touches_inputs(
            seed in any::<u64>(),
            tokens in prop::collection::vec(0u32..V as u32, 1..8),
            upstream in prop::collection::vec(0.1f64..1.0, E),
        ) {
            let enc = encoder(seed);
            let (_, trace) = enc.encode(&tokens).unwrap();
            let mut grads = vec![0.0; enc.parameters().len()];
            enc.backprop(&trace, &upstream, &mut grads).unwrap();
            for t in 0..V as TokenId {
                let touched = enc.embedding_grad(&grads, t).iter().any(|&g| g != 0.0);
                if !tokens.contains(&t) {
                    prop_assert!(!touched, "token {t} outside the input has a gradient");
                }
            }
        }

        #[test]
        fn distance_gradient_matches_differences(
            a in prop::collection::vec(-1.0f64..1.0, 5),
            b in prop::collection::vec(-1.0f64..1.0, 5),
        ) {
            let d = distance(&a, &b).unwrap();
            prop_assume!(d > 1e-3);
            let g = distance_grad(&a, &b, d);
            for k in 0..5 {
                let mut up = a.clone();
                up[k] += 1e-6;
                let mut down = a.clone();
                down[k] -= 1e-6;
                let numeric = (distance(&up, &b).unwrap() - distance(&down, &b).unwrap()) / 2e-6;
                prop_assert!(relative_error(g[k], numeric) < 1e-4);
            }
        }
    }
}
