//! Damped link analysis over the relationship graph.
//!
//! The intimacy matrix is `alpha * (I - (1 - alpha) * A')^{-1}` where `A'` is
//! the column-normalized adjacency matrix. Column `j` is the fixed point of
//! `x <- alpha * e_j + (1 - alpha) * A' x`, and row `i` is the fixed point of
//! the transposed iteration; both are contractions for `alpha > 0`.
//!
//! Small graphs are inverted densely. Larger graphs are solved column by
//! column, and past `dense_limit` documents rows are solved on demand and
//! cached instead of materializing all `N^2` values.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AdjacencyMatrix;

const CACHE_MAGIC: [u8; 4] = *b"QINT";

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("damping factor must lie in (0, 1], got {0}")]
    InvalidDamping(f64),
    #[error("graph has no documents")]
    Empty,
    #[error("solve for {axis} {index} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        axis: &'static str,
        index: usize,
        iterations: usize,
        residual: f64,
    },
    #[error("dense inversion failed: matrix is singular")]
    Singular,
    #[error("intimacy cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub alpha: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Graphs with at most this many documents are inverted densely.
    pub direct_limit: usize,
    /// Graphs with more documents than this compute rows on demand.
    pub dense_limit: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            tol: 1e-8,
            max_iters: 1000,
            direct_limit: 256,
            dense_limit: 20_000,
        }
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for &(i, j, v) in &triplets {
            row_ptr[i + 1] += 1;
            cols.push(j);
            values.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            cols,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[row.clone()]
            .binary_search(&j)
            .map(|k| self.values[row.start + k])
            .unwrap_or(0.0)
    }

    pub fn transpose(&self) -> Self {
        let triplets = (0..self.n)
            .flat_map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], i, self.values[k]))
            })
            .collect();
        Self::from_triplets(self.n, triplets)
    }

    /// `out = self * x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(|k| self.values[k] * x[self.cols[k]])
                .sum();
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                dense[i * self.n + self.cols[k]] = self.values[k];
            }
        }
        dense
    }
}

/// Scale every non-zero column of `a` to sum to one. Dangling columns stay zero.
pub fn column_normalize(a: &AdjacencyMatrix) -> SparseMatrix {
    let mut col_sums = vec![0.0; a.dim()];
    for (_, j, w) in a.iter() {
        col_sums[j] += w;
    }
    let triplets = a.iter().map(|(i, j, w)| (i, j, w / col_sums[j])).collect();
    SparseMatrix::from_triplets(a.dim(), triplets)
}

enum Storage {
    /// Row-major `n * n` values.
    Dense(Vec<f64>),
    Lazy {
        /// Transposed `A'`, so a row solve is a plain matrix-vector product.
        normalized_t: SparseMatrix,
        config: LinkConfig,
        cache: Mutex<HashMap<usize, Arc<[f64]>>>,
    },
}

/// Pairwise connectivity strengths produced by [`compute_intimacy`].
pub struct IntimacyMatrix {
    n: usize,
    storage: Storage,
}

impl std::fmt::Debug for IntimacyMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.storage {
            Storage::Dense(_) => "dense",
            Storage::Lazy { .. } => "lazy",
        };
        f.debug_struct("IntimacyMatrix")
            .field("n", &self.n)
            .field("storage", &kind)
            .finish()
    }
}

impl IntimacyMatrix {
    /// Wrap precomputed row-major values.
    pub fn from_dense(n: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * n, "intimacy values must be n*n");
        Self {
            n,
            storage: Storage::Dense(values),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    /// Row `i`, solved and cached on first access for lazily stored matrices.
    pub fn row(&self, i: usize) -> Result<Arc<[f64]>, LinkError> {
        match &self.storage {
            Storage::Dense(values) => Ok(Arc::from(&values[i * self.n..(i + 1) * self.n])),
            Storage::Lazy {
                normalized_t,
                config,
                cache,
            } => {
                if let Some(row) = cache.lock().expect("cache lock").get(&i) {
                    return Ok(Arc::clone(row));
                }
                let row: Arc<[f64]> = damped_solve(normalized_t, i, config, "row")?.into();
                cache.lock().expect("cache lock").insert(i, Arc::clone(&row));
                Ok(row)
            }
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64, LinkError> {
        match &self.storage {
            Storage::Dense(values) => Ok(values[i * self.n + j]),
            Storage::Lazy { .. } => Ok(self.row(i)?[j]),
        }
    }

    /// Write all rows as little-endian `f32`, preceded by the magic and `N`.
    pub fn write_cache(&self, path: &Path) -> Result<(), LinkError> {
        let n = u32::try_from(self.n).map_err(|_| LinkError::Cache("N exceeds u32".into()))?;
        let mut buf = Vec::with_capacity(8 + 4 * self.n * self.n);
        buf.extend_from_slice(&CACHE_MAGIC);
        buf.extend_from_slice(&n.to_le_bytes());
        for i in 0..self.n {
            for v in self.row(i)?.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self, LinkError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || bytes[..4] != CACHE_MAGIC {
            return Err(LinkError::Cache("bad header".into()));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * n * n {
            return Err(LinkError::Cache(format!(
                "expected {} value bytes, found {}",
                4 * n * n,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Self::from_dense(n, values))
    }
}

/// Fixed point of `x <- alpha * e_index + (1 - alpha) * m x`. The residual of
/// the linear system at iterate `x_k` is exactly `x_k - x_{k+1}`.
fn damped_solve(
    m: &SparseMatrix,
    index: usize,
    config: &LinkConfig,
    axis: &'static str,
) -> Result<Vec<f64>, LinkError> {
    let n = m.dim();
    let alpha = config.alpha;
    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..config.max_iters {
        m.mul_vec(&x, &mut next);
        for v in next.iter_mut() {
            *v *= 1.0 - alpha;
        }
        next[index] += alpha;
        residual = x
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut x, &mut next);
        if residual <= config.tol {
            return Ok(x);
        }
    }
    Err(LinkError::NotConverged {
        axis,
        index,
        iterations: config.max_iters,
        residual,
    })
}

/// Solve every column by damped iteration and store rows densely.
pub fn compute_intimacy_iterative(
    a: &AdjacencyMatrix,
    config: &LinkConfig,
) -> Result<IntimacyMatrix, LinkError> {
    validate(a, config)?;
    let n = a.dim();
    let normalized = column_normalize(a);
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| damped_solve(&normalized, j, config, "column"))
        .collect::<Result<_, _>>()?;
    let mut values = vec![0.0; n * n];
    for (j, column) in columns.iter().enumerate() {
        for (i, v) in column.iter().enumerate() {
            values[i * n + j] = *v;
        }
    }
    Ok(IntimacyMatrix::from_dense(n, values))
}

/// Nodes `j` with a walk `start -> .. -> j` through non-zeros of `m`, including `start`.
fn reachable_from(m: &SparseMatrix, start: usize) -> Vec<bool> {
    let mut seen = vec![false; m.n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for &j in &m.cols[m.row_ptr[i]..m.row_ptr[i + 1]] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

/// Invert `I - (1 - alpha) A'` with an LU factorization.
pub fn compute_intimacy_direct(
    a: &AdjacencyMatrix,
    config: &LinkConfig,
) -> Result<IntimacyMatrix, LinkError> {
    validate(a, config)?;
    let n = a.dim();
    let normalized = column_normalize(a);
    let mut system = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for k in normalized.row_ptr[i]..normalized.row_ptr[i + 1] {
            system[(i, normalized.cols[k])] -= (1.0 - config.alpha) * normalized.values[k];
        }
    }
    let inverse = system.try_inverse().ok_or(LinkError::Singular)?;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let reach = reachable_from(&normalized, i);
        for j in 0..n {
            // Entries without a connecting walk are exactly zero; round-off is discarded.
            if reach[j] {
                values[i * n + j] = (config.alpha * inverse[(i, j)]).max(0.0);
            }
        }
    }
    Ok(IntimacyMatrix::from_dense(n, values))
}

/// Rows solved on first access; nothing is computed up front.
pub fn compute_intimacy_lazy(
    a: &AdjacencyMatrix,
    config: &LinkConfig,
) -> Result<IntimacyMatrix, LinkError> {
    validate(a, config)?;
    Ok(IntimacyMatrix {
        n: a.dim(),
        storage: Storage::Lazy {
            normalized_t: column_normalize(a).transpose(),
            config: config.clone(),
            cache: Mutex::new(HashMap::new()),
        },
    })
}

/// Pick the solver by graph size: dense inversion, column iteration, or
/// on-demand rows.
pub fn compute_intimacy(a: &AdjacencyMatrix, config: &LinkConfig) -> Result<IntimacyMatrix, LinkError> {
    let n = a.dim();
    if n <= config.direct_limit {
        compute_intimacy_direct(a, config)
    } else if n <= config.dense_limit {
        compute_intimacy_iterative(a, config)
    } else {
        compute_intimacy_lazy(a, config)
    }
}

fn validate(a: &AdjacencyMatrix, config: &LinkConfig) -> Result<(), LinkError> {
    if !(config.alpha > 0.0 && config.alpha <= 1.0) {
        return Err(LinkError::InvalidDamping(config.alpha));
    }
    if a.dim() == 0 {
        return Err(LinkError::Empty);
    }
    Ok(())
}

/// Other documents ordered from strongest to weakest connection to `anchor`.
///
/// Positions `1..=n_connected` (1-based) hold every document with positive
/// intimacy; the zero-intimacy documents follow. Equal values are ordered by
/// ascending document index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedNeighbors {
    pub anchor: usize,
    pub order: Vec<usize>,
    pub n_connected: usize,
}

impl RankedNeighbors {
    /// Document at 1-based `position`.
    pub fn at(&self, position: usize) -> usize {
        self.order[position - 1]
    }
}

pub fn rank_neighbors(row: &[f64], anchor: usize) -> RankedNeighbors {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| j != anchor).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let n_connected = order.iter().take_while(|&&j| row[j] > 0.0).count();
    RankedNeighbors {
        anchor,
        order,
        n_connected,
    }
}
