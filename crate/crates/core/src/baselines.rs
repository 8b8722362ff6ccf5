//! Comparison layers sharing the routed-layer pipeline: attention across the
//! same within-chunk position of every chunk, and attention within buckets of
//! fixed random-projection hashes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{transformer_layer, AttentionConfig, MaskSpec, TransformerWeights};
use crate::clustering::{grouped_layer_with, routed_layer, ClusterRoute, Router};
use crate::error::{Error, Result};
use crate::nn::{dot, Matrix};
use crate::sliding::{ChunkLayout, LayerState};

/// Within-chunk index of every flattened row: `0..q` for question copies, then
/// `q..q+m` for the chunk's context rows.
pub fn sparse_position_ids(layout: &ChunkLayout) -> Vec<usize> {
    (0..layout.chunks)
        .flat_map(|k| 0..layout.q + layout.flat_slice(k).len())
        .collect()
}

/// Groups row `j` of every chunk together, for each `j` in `[0, q+m)`.
pub fn sparse_position_route(layout: &ChunkLayout) -> ClusterRoute {
    ClusterRoute::by_id(sparse_position_ids(layout))
}

pub fn sparse_position_layer(
    state: &LayerState,
    weights: &TransformerWeights,
    cfg: &AttentionConfig,
    mask: MaskSpec,
) -> Result<LayerState> {
    let route = sparse_position_route(&state.layout);
    let (out, _) = grouped_layer_with(state, &route, |_, g| {
        Ok((transformer_layer(&g, weights, cfg, mask)?.states, ()))
    })?;
    Ok(out)
}

/// Fixed hashing vectors; a row's bucket is the index of its largest projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LshHasher {
    vectors: Matrix,
}

impl LshHasher {
    /// `buckets` standard-normal hashing vectors of width `width`.
    pub fn new(buckets: usize, width: usize, seed: u64) -> Result<Self> {
        if buckets == 0 || width == 0 {
            return Err(Error::Invalid("hashing needs at least one vector of positive width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { vectors: Matrix::random_normal(buckets, width, 1.0, &mut rng) })
    }

    pub fn from_vectors(vectors: Matrix) -> Result<Self> {
        if vectors.rows() == 0 || !vectors.is_finite() {
            return Err(Error::Invalid("hashing vectors must be non-empty and finite".into()));
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn buckets(&self) -> usize {
        self.vectors.rows()
    }
}

/// Bucket of each row: argmax over projections, lowest index on ties.
pub fn lsh_assign(rows: &Matrix, hasher: &LshHasher) -> Result<Vec<usize>> {
    let h = &hasher.vectors;
    if rows.cols() != h.cols() {
        return Err(Error::shape(
            "lsh_assign",
            format!("rows of width {}, hashing vectors of width {}", rows.cols(), h.cols()),
        ));
    }
    Ok((0..rows.rows())
        .map(|i| {
            let mut best = (0, f64::NEG_INFINITY);
            for b in 0..h.rows() {
                let s = dot(rows.row(i), h.row(b));
                if s > best.1 {
                    best = (b, s);
                }
            }
            best.0
        })
        .collect())
}

impl Router for LshHasher {
    fn route(&self, rows: &Matrix) -> Result<Vec<usize>> {
        lsh_assign(rows, self)
    }
}

pub fn lsh_layer(
    state: &LayerState,
    hasher: &LshHasher,
    weights: &TransformerWeights,
    cfg: &AttentionConfig,
    mask: MaskSpec,
) -> Result<LayerState> {
    routed_layer(state, hasher, weights, cfg, mask)
}
