//! Run configuration file (TOML). Every field has a default except `task.kind`;
//! unknown keys are rejected and every error names the offending key path.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Deserializer};

use longseq_core::harness::{
    gen_kv_retrieval, CentroidFrequency, CharCorpus, Example, LayerKind, Mode, ModelConfig, SyntheticTaskSpec,
    TrainRun,
};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Drives model initialisation, data generation, batching and dropout.
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSection {
    KvRetrieval {
        #[serde(default = "kv::length")]
        length: usize,
        #[serde(default = "kv::pairs")]
        pairs: usize,
        #[serde(default = "kv::noise_vocab")]
        noise_vocab: usize,
        #[serde(default = "kv::key_vocab")]
        key_vocab: usize,
        #[serde(default = "kv::value_vocab")]
        value_vocab: usize,
        #[serde(default = "kv::min_gap")]
        min_gap: usize,
        #[serde(default = "kv::train_examples")]
        train_examples: usize,
        #[serde(default = "kv::test_examples")]
        test_examples: usize,
    },
    CharLm {
        corpus: PathBuf,
        #[serde(default = "lm::length")]
        length: usize,
        #[serde(default = "lm::test_fraction")]
        test_fraction: f64,
    },
}

mod kv {
    pub fn length() -> usize {
        2048
    }
    pub fn pairs() -> usize {
        2
    }
    pub fn noise_vocab() -> usize {
        1
    }
    pub fn key_vocab() -> usize {
        8
    }
    pub fn value_vocab() -> usize {
        8
    }
    pub fn min_gap() -> usize {
        256
    }
    pub fn train_examples() -> usize {
        6400
    }
    pub fn test_examples() -> usize {
        200
    }
}

mod lm {
    pub fn length() -> usize {
        256
    }
    pub fn test_fraction() -> f64 {
        0.1
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Defaults to the schedule length.
    pub num_layers: Option<usize>,
    pub schedule: Vec<LayerKind>,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub window: usize,
    pub stride: usize,
    pub clusters: usize,
    pub hashes: usize,
    /// Defaults to the task's vocabulary size.
    pub vocab: Option<usize>,
    pub bank_capacity: usize,
    pub position_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            num_layers: None,
            schedule: d.schedule,
            d_model: d.d_model,
            heads: d.heads,
            ffn_dim: d.ffn_dim,
            dropout: d.dropout,
            window: d.window,
            stride: d.stride,
            clusters: d.clusters,
            hashes: d.hashes,
            vocab: None,
            bank_capacity: d.bank_capacity,
            position_scale: d.position_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm threshold; `0` disables clipping.
    pub clip: f64,
    pub log_every: usize,
    /// `"epoch"`, `"never"`, or a step count.
    #[serde(deserialize_with = "frequency")]
    pub centroid_frequency: CentroidFrequency,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainRun::default();
        Self {
            lr: d.lr,
            warmup_steps: d.warmup_steps,
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            clip: d.clip.unwrap_or(0.0),
            log_every: d.log_every,
            centroid_frequency: d.centroid_frequency,
            kmeans_iters: d.kmeans_iters,
            kmeans_restarts: d.kmeans_restarts,
        }
    }
}

fn frequency<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<CentroidFrequency, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Steps(usize),
        Name(String),
    }
    match Repr::deserialize(de)? {
        Repr::Steps(0) => Err(serde::de::Error::custom("centroid frequency must be at least 1")),
        Repr::Steps(n) => Ok(CentroidFrequency::Every(n)),
        Repr::Name(s) if s == "epoch" => Ok(CentroidFrequency::Epoch),
        Repr::Name(s) if s == "never" => Ok(CentroidFrequency::Never),
        Repr::Name(s) => Err(serde::de::Error::custom(format!(
            "expected \"epoch\", \"never\" or a step count, found \"{s}\""
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Overridden by `LONGSEQ_METRICS_DIR`.
    pub metrics_dir: PathBuf,
    /// Relative paths resolve against `metrics_dir`.
    pub checkpoint: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { metrics_dir: PathBuf::from("runs/default"), checkpoint: PathBuf::from("model.ckpt") }
    }
}

/// Validated configuration, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSection,
    pub model: ModelConfig,
    /// Whether `model.vocab` came from the file rather than the task.
    pub vocab_explicit: bool,
    pub run: TrainRun,
    pub output: OutputSection,
    /// Directory of the config file, for resolving relative paths.
    pub base_dir: PathBuf,
}

/// Parses and validates a config from TOML text.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| anyhow!("invalid TOML: {e}"))?;
    let file: FileConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("{path}: {}", e.into_inner().message())
    })?;
    resolve(file, base_dir)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, &base).with_context(|| format!("in {}", path.display()))
}

fn resolve(file: FileConfig, base_dir: &Path) -> Result<RunConfig> {
    let m = file.model;
    let (mode, task_vocab) = match &file.task {
        TaskSection::KvRetrieval { noise_vocab, key_vocab, value_vocab, .. } => {
            (Mode::QaEncoder, Some(noise_vocab + key_vocab + value_vocab))
        }
        TaskSection::CharLm { .. } => (Mode::CausalLm, None),
    };
    let model = ModelConfig {
        num_layers: m.num_layers.unwrap_or(m.schedule.len()),
        schedule: m.schedule,
        d_model: m.d_model,
        heads: m.heads,
        ffn_dim: m.ffn_dim,
        dropout: m.dropout,
        window: m.window,
        stride: m.stride,
        clusters: m.clusters,
        hashes: m.hashes,
        // char-lm vocabularies are only known once the corpus is read
        vocab: m.vocab.or(task_vocab).unwrap_or(1),
        mode,
        seed: file.seed,
        bank_capacity: m.bank_capacity,
        position_scale: m.position_scale,
    };
    if model.num_layers != model.schedule.len() {
        bail!("model.num_layers: {} does not match the {}-entry schedule", model.num_layers, model.schedule.len());
    }
    if let Some(i) = model.schedule.iter().position(|k| k.is_routed()) {
        if !model.schedule[..i].contains(&LayerKind::SlidingWindow) {
            bail!("model.schedule: layer {} ({}) must follow a sliding-window layer", i + 1, model.schedule[i].short_name());
        }
    }
    model.validate().map_err(|e| anyhow!("model: {e}"))?;
    if let (Some(v), Some(t)) = (m.vocab, task_vocab) {
        if v < t {
            bail!("model.vocab: {v} is smaller than the task vocabulary {t}");
        }
    }
    let t = file.train;
    let run = TrainRun {
        lr: t.lr,
        warmup_steps: t.warmup_steps,
        max_steps: t.max_steps,
        batch_size: t.batch_size,
        clip: (t.clip > 0.0).then_some(t.clip),
        log_every: t.log_every,
        centroid_frequency: t.centroid_frequency,
        kmeans_iters: t.kmeans_iters,
        kmeans_restarts: t.kmeans_restarts,
        seed: file.seed,
    };
    run.validate().map_err(|e| anyhow!("train: {e}"))?;
    let cfg = RunConfig {
        seed: file.seed,
        task: file.task,
        model,
        vocab_explicit: m.vocab.is_some(),
        run,
        output: file.output,
        base_dir: base_dir.to_path_buf(),
    };
    if let Some((train, _)) = cfg.kv_specs() {
        train.validate().map_err(|e| anyhow!("task: {e}"))?;
    }
    Ok(cfg)
}

impl RunConfig {
    /// Train and test specs of a key-value task; they differ only in seed and size.
    pub fn kv_specs(&self) -> Option<(SyntheticTaskSpec, SyntheticTaskSpec)> {
        match self.task {
            TaskSection::KvRetrieval {
                length,
                pairs,
                noise_vocab,
                key_vocab,
                value_vocab,
                min_gap,
                train_examples,
                test_examples,
            } => {
                let train = SyntheticTaskSpec {
                    length,
                    pairs,
                    noise_vocab,
                    key_vocab,
                    value_vocab,
                    min_gap,
                    window: self.model.window,
                    examples: train_examples,
                    seed: self.seed,
                    ..Default::default()
                };
                let test = SyntheticTaskSpec {
                    examples: test_examples,
                    seed: self.seed.wrapping_add(0x5EED),
                    ..train.clone()
                };
                Some((train, test))
            }
            TaskSection::CharLm { .. } => None,
        }
    }

    /// Builds the train and test sets and fixes the model vocabulary.
    pub fn datasets(&mut self) -> Result<(Vec<Example>, Vec<Example>)> {
        match &self.task {
            TaskSection::KvRetrieval { .. } => {
                let (train, test) = self.kv_specs().expect("kv task");
                Ok((gen_kv_retrieval(&train)?, gen_kv_retrieval(&test)?))
            }
            TaskSection::CharLm { corpus, length, test_fraction } => {
                let path = self.base_dir.join(corpus);
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading corpus {}", path.display()))?;
                let corpus = CharCorpus::from_text(&text)?;
                if self.vocab_explicit && self.model.vocab < corpus.vocab() {
                    bail!("model.vocab: {} is smaller than the corpus alphabet {}", self.model.vocab, corpus.vocab());
                }
                if !self.vocab_explicit {
                    self.model.vocab = corpus.vocab();
                }
                Ok(corpus.split(*length, *test_fraction)?)
            }
        }
    }

    pub fn metrics_dir(&self) -> PathBuf {
        match std::env::var_os("LONGSEQ_METRICS_DIR") {
            Some(dir) => PathBuf::from(dir),
            None => self.base_dir.join(&self.output.metrics_dir),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.metrics_dir().join(&self.output.checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config_str(text, Path::new("."))
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse("seed = 3\n[task]\nkind = \"kv-retrieval\"\n").unwrap();
        assert_eq!(cfg.model.num_layers, 4);
        assert_eq!(cfg.model.vocab, 17);
        assert_eq!(cfg.model.seed, 3);
        assert_eq!(cfg.run.max_steps, TrainRun::default().max_steps);
        assert_eq!(cfg.model.mode, Mode::QaEncoder);
    }

    #[test]
    fn shipped_retrieval_config_resolves() {
        let cfg = parse(include_str!("../../../configs/retrieval.toml")).unwrap();
        assert_eq!(cfg.model.clusters, 16);
        assert_eq!(cfg.run.centroid_frequency, CentroidFrequency::Every(25));
        assert_eq!(cfg.run.kmeans_restarts, 1);
    }

    #[test]
    fn cluster_layer_first_is_rejected() {
        let err = parse(
            "[task]\nkind = \"kv-retrieval\"\n[model]\nschedule = [\"cluster-former\", \"sliding-window\"]\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.starts_with("model.schedule") && err.contains("sliding-window"), "{err}");
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = parse("[task]\nkind = \"kv-retrieval\"\n[model]\nstirde = 4\n").unwrap_err().to_string();
        assert!(err.contains("stirde"), "{err}");
        assert!(err.starts_with("model"), "{err}");
    }

    #[test]
    fn type_mismatch_has_key_path() {
        let err = parse("[task]\nkind = \"kv-retrieval\"\n[train]\nlr = \"fast\"\n").unwrap_err().to_string();
        assert!(err.starts_with("train.lr"), "{err}");
    }

    #[test]
    fn frequency_forms() {
        let f = |s: &str| {
            parse(&format!("[task]\nkind = \"kv-retrieval\"\n[train]\ncentroid_frequency = {s}\n"))
                .map(|c| c.run.centroid_frequency)
        };
        assert_eq!(f("\"never\"").unwrap(), CentroidFrequency::Never);
        assert_eq!(f("7").unwrap(), CentroidFrequency::Every(7));
        assert!(f("0").is_err());
        assert!(f("\"hourly\"").is_err());
    }

    #[test]
    fn missing_task_is_rejected() {
        assert!(parse("seed = 1\n").is_err());
    }
}
