//! Model assembly, synthetic tasks, training, evaluation and checkpoints.

mod checkpoint;
mod config;
mod data;
mod model;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_weights_into, save_checkpoint, MAGIC, VERSION,
};
pub use config::{CentroidFrequency, LayerKind, Mode, ModelConfig, TrainRun};
pub use data::{gen_kv_retrieval, read_cache, write_cache, CharCorpus, Example, QueryPosition, SyntheticTaskSpec};
pub use model::{sinusoidal_positions, Layer, LayerTrace, LossStats, Model, Routing, RunOptions, Trace};
pub use train::{evaluate, evaluate_stats, train, Metric, MetricRecord, TrainState};
