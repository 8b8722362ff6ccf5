use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::clustering::UpdateFrequency;
use crate::error::{Error, Result};

/// Layer type at one depth of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    SlidingWindow,
    ClusterFormer,
    SparsePosition,
    Lsh,
}

impl LayerKind {
    /// Layers that regroup the flattened state instead of reading windows.
    pub fn is_routed(self) -> bool {
        !matches!(self, LayerKind::SlidingWindow)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LayerKind::SlidingWindow => "sw",
            LayerKind::ClusterFormer => "cf",
            LayerKind::SparsePosition => "sp",
            LayerKind::Lsh => "lsh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One label per example, read out at the last context token.
    QaEncoder,
    /// Next-token prediction at every context position, causal attention.
    CausalLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub schedule: Vec<LayerKind>,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub window: usize,
    pub stride: usize,
    /// Centroids per cluster-former layer.
    pub clusters: usize,
    /// Hashing vectors per LSH layer.
    pub hashes: usize,
    pub vocab: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Rows kept by each cluster-former layer's memory bank.
    pub bank_capacity: usize,
    /// Multiplier on the sinusoidal position encoding added to token embeddings.
    pub position_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use LayerKind::*;
        Self {
            num_layers: 4,
            schedule: vec![SlidingWindow, ClusterFormer, SlidingWindow, SlidingWindow],
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.0,
            window: 64,
            stride: 48,
            clusters: 16,
            hashes: 16,
            vocab: 64,
            mode: Mode::QaEncoder,
            seed: 0,
            bank_capacity: 100_000,
            position_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.len() != self.num_layers {
            return Err(Error::Invalid(format!(
                "schedule lists {} layers but num_layers is {}",
                self.schedule.len(),
                self.num_layers
            )));
        }
        if let Some((i, kind)) = self
            .schedule
            .iter()
            .enumerate()
            .find(|&(i, k)| k.is_routed() && !self.schedule[..i].contains(&LayerKind::SlidingWindow))
        {
            return Err(Error::Invalid(format!(
                "layer {} ({kind:?}) must be preceded by at least one sliding-window layer",
                i + 1
            )));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Invalid(format!(
                "stride {} must satisfy 0 < stride <= window {}",
                self.stride, self.window
            )));
        }
        if self.vocab == 0 {
            return Err(Error::Invalid("vocab must be positive".into()));
        }
        if self.schedule.contains(&LayerKind::ClusterFormer) && self.clusters == 0 {
            return Err(Error::Invalid("clusters must be positive".into()));
        }
        if self.schedule.contains(&LayerKind::Lsh) && self.hashes == 0 {
            return Err(Error::Invalid("hashes must be positive".into()));
        }
        if !self.position_scale.is_finite() {
            return Err(Error::Invalid("position_scale must be finite".into()));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            causal: self.mode == Mode::CausalLm,
        }
    }
}

/// When centroids are refreshed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentroidFrequency {
    /// Once per pass over the training set.
    Epoch,
    Every(usize),
    Never,
}

impl CentroidFrequency {
    pub fn resolve(self, steps_per_epoch: usize) -> UpdateFrequency {
        match self {
            CentroidFrequency::Epoch => UpdateFrequency::Every(steps_per_epoch.max(1)),
            CentroidFrequency::Every(n) => UpdateFrequency::Every(n),
            CentroidFrequency::Never => UpdateFrequency::Never,
        }
    }
}

/// Optimiser and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip threshold; `None` disables clipping.
    pub clip: Option<f64>,
    pub log_every: usize,
    pub centroid_frequency: CentroidFrequency,
    pub kmeans_iters: usize,
    /// Seeded k-means runs per refresh; the lowest SSE wins.
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 50,
            max_steps: 500,
            batch_size: 8,
            clip: Some(1.0),
            log_every: 10,
            centroid_frequency: CentroidFrequency::Epoch,
            kmeans_iters: 20,
            kmeans_restarts: 4,
            seed: 0,
        }
    }
}

impl TrainRun {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.max_steps {
            return Err(Error::Invalid(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.kmeans_restarts == 0 {
            return Err(Error::Invalid("batch_size, log_every and kmeans_restarts must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Invalid("clip threshold must be positive".into()));
        }
        if self.centroid_frequency == CentroidFrequency::Every(0) {
            return Err(Error::Invalid("centroid frequency must be at least 1".into()));
        }
        Ok(())
    }

    /// Linear warm-up to `lr`, then linear decay to zero at `max_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let rest = (self.max_steps - self.warmup_steps).max(1) as f64;
        self.lr * (1.0 - (step - self.warmup_steps) as f64 / rest).max(0.0)
    }
}
