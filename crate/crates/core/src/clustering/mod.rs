//! Cluster-routed attention.
//!
//! Rows of the flattened layer state are assigned to the nearest centroid by
//! cosine similarity, stably sorted by cluster id, cut into chunks of `m`
//! rows, encoded per chunk, and scattered back to their original order.
//! Centroids come from periodic k-means over a FIFO memory bank of recent
//! hidden states and are kept in a greedy nearest-neighbour tour so that
//! neighbouring cluster ids hold similar states.

mod centroids;
mod kmeans;
mod memory;
mod route;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{transformer_layer, AttentionConfig, MaskSpec, TokenGroup, TransformerWeights};
use crate::error::Result;
use crate::nn::Matrix;
use crate::sliding::LayerState;

pub use centroids::{assign_clusters, order_centroids_greedy, Centroids};
pub use kmeans::{kmeans, kmeans_restarts, KMeansResult};
pub use memory::MemoryBank;
pub use route::{gather_groups, scatter_back, sort_and_chunk, ClusterRoute};

/// Anything that maps hidden-state rows to bucket ids.
pub trait Router {
    fn route(&self, rows: &Matrix) -> Result<Vec<usize>>;
}

impl Router for Centroids {
    fn route(&self, rows: &Matrix) -> Result<Vec<usize>> {
        assign_clusters(rows, self)
    }
}

/// How often centroids are recomputed from the memory bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateFrequency {
    /// Every `n` training iterations (`n >= 1`).
    Every(usize),
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSchedule {
    pub frequency: UpdateFrequency,
    pub kmeans_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl UpdateSchedule {
    pub fn fires(&self, iteration: usize) -> bool {
        match self.frequency {
            UpdateFrequency::Every(n) => n > 0 && iteration > 0 && iteration % n == 0,
            UpdateFrequency::Never => false,
        }
    }
}

/// Outcome of a scheduled centroid refresh.
#[derive(Debug, Clone, PartialEq)]
pub enum CentroidUpdate {
    NotDue,
    Updated(Centroids),
    /// The refresh was due but could not run; previous centroids stay in place.
    Retained { reason: String },
}

/// Refreshes centroids when `iteration` is a multiple of the schedule's frequency:
/// k-means over the bank, then the greedy tour. The new epoch tag is `current + 1`.
pub fn maybe_update_centroids(
    bank: &MemoryBank,
    schedule: &UpdateSchedule,
    iteration: usize,
    current: &Centroids,
) -> CentroidUpdate {
    if !schedule.fires(iteration) {
        return CentroidUpdate::NotDue;
    }
    let p = current.len();
    let retained = |reason: String| {
        log::warn!("centroid refresh at iteration {iteration} skipped: {reason}");
        CentroidUpdate::Retained { reason }
    };
    if bank.len() < p {
        return retained(format!("memory bank holds {} rows, need {p}", bank.len()));
    }
    let result = kmeans_restarts(&bank.to_matrix(), p, schedule.kmeans_iters, schedule.seed, schedule.restarts.max(1))
        .and_then(|r| Centroids::from_raw(&r.centroids, current.epoch() + 1));
    match result {
        Ok(c) => CentroidUpdate::Updated(c),
        Err(e) => retained(e.to_string()),
    }
}

/// Flatten → sort and chunk by `assignment` → encode per chunk → scatter back → unflatten.
pub fn routed_layer_with<C, F>(
    state: &LayerState,
    assignment: Vec<usize>,
    encode: F,
) -> Result<(LayerState, ClusterRoute, Vec<C>)>
where
    C: Send,
    F: Fn(usize, TokenGroup) -> Result<(Matrix, C)> + Sync,
{
    let flat_len = state.layout.flat_len();
    if assignment.len() != flat_len {
        return Err(crate::Error::shape(
            "routed_layer_with",
            format!("{} ids for {flat_len} rows", assignment.len()),
        ));
    }
    let route = ClusterRoute::new(assignment, state.layout.m)?;
    let (out, side) = grouped_layer_with(state, &route, encode)?;
    Ok((out, route, side))
}

/// Runs `encode` over each group of a precomputed route and scatters the outputs back.
pub fn grouped_layer_with<C, F>(state: &LayerState, route: &ClusterRoute, encode: F) -> Result<(LayerState, Vec<C>)>
where
    C: Send,
    F: Fn(usize, TokenGroup) -> Result<(Matrix, C)> + Sync,
{
    let flat = state.flatten();
    if route.len() != flat.len() {
        return Err(crate::Error::shape(
            "grouped_layer_with",
            format!("route over {} rows, state has {}", route.len(), flat.len()),
        ));
    }
    let results: Vec<(Matrix, C)> = gather_groups(&flat, route)
        .into_par_iter()
        .enumerate()
        .map(|(k, g)| encode(k, g))
        .collect::<Result<_>>()?;
    let (outs, side): (Vec<Matrix>, Vec<C>) = results.into_iter().unzip();
    let merged = scatter_back(&outs, route)?;
    Ok((LayerState::unflatten(&merged, state.layout)?, side))
}

/// A routed Transformer layer with any [`Router`], inference mode.
pub fn routed_layer(
    state: &LayerState,
    router: &dyn Router,
    weights: &TransformerWeights,
    cfg: &AttentionConfig,
    mask: MaskSpec,
) -> Result<LayerState> {
    let assignment = router.route(&state.flatten().states)?;
    let (out, _, _) = routed_layer_with(state, assignment, |_, g| {
        Ok((transformer_layer(&g, weights, cfg, mask)?.states, ()))
    })?;
    Ok(out)
}

/// Cluster-routed Transformer layer, inference mode.
pub fn cluster_former_layer(
    state: &LayerState,
    centroids: &Centroids,
    weights: &TransformerWeights,
    cfg: &AttentionConfig,
    mask: MaskSpec,
) -> Result<LayerState> {
    routed_layer(state, centroids, weights, cfg, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sliding::plan_chunks;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_fires_on_multiples() {
        let s = UpdateSchedule { frequency: UpdateFrequency::Every(2), kmeans_iters: 5, restarts: 1, seed: 0 };
        let fired: Vec<usize> = (1..=4).filter(|&i| s.fires(i)).collect();
        assert_eq!(fired, vec![2, 4]);
        let never = UpdateSchedule { frequency: UpdateFrequency::Never, ..s };
        assert!((0..100).all(|i| !never.fires(i)));
    }

    #[test]
    fn refresh_is_deterministic_and_bumps_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bank = MemoryBank::new(3, 100);
        bank.push(&Matrix::random_normal(50, 3, 1.0, &mut rng)).unwrap();
        let init = Centroids::random(4, 3, 1).unwrap();
        let s = UpdateSchedule { frequency: UpdateFrequency::Every(1), kmeans_iters: 10, restarts: 2, seed: 3 };
        let a = maybe_update_centroids(&bank, &s, 1, &init);
        let b = maybe_update_centroids(&bank, &s, 2, &init);
        assert_eq!(a, b);
        match a {
            CentroidUpdate::Updated(c) => assert_eq!(c.epoch(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_bank_retains_previous() {
        let bank = MemoryBank::new(3, 10);
        let init = Centroids::random(4, 3, 1).unwrap();
        let s = UpdateSchedule { frequency: UpdateFrequency::Every(1), kmeans_iters: 10, restarts: 2, seed: 3 };
        assert!(matches!(maybe_update_centroids(&bank, &s, 1, &init), CentroidUpdate::Retained { .. }));
        assert_eq!(maybe_update_centroids(&bank, &s, 0, &init), CentroidUpdate::NotDue);
    }

    fn state(q: usize, x: usize, l: usize, m: usize, d: usize, seed: u64) -> LayerState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = plan_chunks(q, x, l, m).unwrap();
        LayerState::new(
            &Matrix::random_normal(q, d, 1.0, &mut rng),
            Matrix::random_normal(x, d, 1.0, &mut rng),
            layout,
        )
        .unwrap()
    }

    #[test]
    fn identity_encoder_round_trips_state() {
        let s = state(2, 13, 5, 4, 3, 8);
        let c = Centroids::random(3, 3, 2).unwrap();
        let a = assign_clusters(&s.flatten().states, &c).unwrap();
        let (out, route, _) = routed_layer_with(&s, a, |_, g| Ok((g.states, ()))).unwrap();
        assert_eq!(out, s);
        assert_eq!(route.len(), s.layout.flat_len());
    }

    #[test]
    fn single_cluster_single_chunk_is_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig::new(8, 2, 16);
        let w = TransformerWeights::new("cf", &cfg, &mut rng);
        let s = state(0, 6, 8, 8, 8, 6);
        let c = Centroids::random(1, 8, 0).unwrap();
        let out = cluster_former_layer(&s, &c, &w, &cfg, MaskSpec::None).unwrap();
        let flat = s.flatten();
        let full = transformer_layer(&flat, &w, &cfg, MaskSpec::None).unwrap();
        assert!(out.context.max_abs_diff(&full.states) < 1e-9);
    }
}
