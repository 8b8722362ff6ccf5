//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "LSEQCKPT"
//! version   u32
//! meta_len  u64, then meta_len bytes of UTF-8 JSON (model config, centroid
//!           epochs, optimiser scalars, RNG state)
//! count     u64, then `count` tensors:
//!   name_len u32, name bytes, rows u64, cols u64, rows·cols f64 values
//! ```
//!
//! Tensor names: parameter names, `layer{i}.centroids`, `layer{i}.bank`,
//! `layer{i}.hash`, `adam.first.{param}` and `adam.second.{param}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::baselines::LshHasher;
use crate::clustering::{Centroids, MemoryBank};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Matrix, Moments};

use super::config::ModelConfig;
use super::model::{Model, Routing};
use super::train::TrainState;

pub const MAGIC: &[u8; 8] = b"LSEQCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    /// Centroid epoch per cluster-former layer index.
    epochs: BTreeMap<usize, u64>,
    train: Option<TrainMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainMeta {
    iteration: usize,
    adam_step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// u128 as decimal text
    rng_word_pos: String,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u64(buf, m.rows() as u64);
    put_u64(buf, m.cols() as u64);
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a model and, optionally, its training state.
pub fn encode_checkpoint(model: &Model, train: Option<&TrainState>) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Matrix)> = model.params().into_iter().map(|p| (p.name().to_string(), &p.value)).collect();
    let mut owned: Vec<(String, Matrix)> = Vec::new();
    let mut epochs = BTreeMap::new();
    for (i, layer) in model.layers.iter().enumerate() {
        match &layer.routing {
            Routing::Cluster { centroids, bank } => {
                epochs.insert(i, centroids.epoch());
                tensors.push((format!("layer{i}.centroids"), centroids.vectors()));
                owned.push((format!("layer{i}.bank"), bank.to_matrix()));
            }
            Routing::Hash(h) => tensors.push((format!("layer{i}.hash"), h.vectors())),
            Routing::Window | Routing::Position => {}
        }
    }
    let train_meta = train.map(|t| TrainMeta {
        iteration: t.iteration,
        adam_step: t.adam.step_count(),
        lr: t.adam.lr,
        beta1: t.adam.beta1,
        beta2: t.adam.beta2,
        eps: t.adam.eps,
        rng_seed: t.rng.get_seed(),
        rng_stream: t.rng.get_stream(),
        rng_word_pos: t.rng.get_word_pos().to_string(),
    });
    if let Some(t) = train {
        for (name, m) in t.adam.moments() {
            tensors.push((format!("adam.first.{name}"), &m.first));
            tensors.push((format!("adam.second.{name}"), &m.second));
        }
    }
    let meta = serde_json::to_vec(&Meta { model: model.config().clone(), epochs, train: train_meta })?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u64(&mut buf, meta.len() as u64);
    buf.extend_from_slice(&meta);
    put_u64(&mut buf, (tensors.len() + owned.len()) as u64);
    for (name, m) in tensors.iter().map(|(n, m)| (n, *m)).chain(owned.iter().map(|(n, m)| (n, m))) {
        put_tensor(&mut buf, name, m);
    }
    Ok(buf)
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(path: &Path, model: &Model, train: Option<&TrainState>) -> Result<()> {
    let bytes = encode_checkpoint(model, train)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated while reading {what} at byte {}", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Corrupt(format!("{what} does not fit in memory")))
    }
}

/// Parsed container contents before they are applied to a model.
struct Contents {
    meta: Meta,
    tensors: BTreeMap<String, Matrix>,
}

fn decode(bytes: &[u8]) -> Result<Contents> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let meta_len = r.len("metadata length")?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    let count = r.len("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.len("tensor rows")?;
        let cols = r.len("tensor cols")?;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| {
            Error::Corrupt(format!("tensor `{name}` size overflows"))
        })?;
        let raw = r.take(n, &format!("tensor `{name}`"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    if r.at != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Contents { meta, tensors })
}

fn take_tensor(tensors: &mut BTreeMap<String, Matrix>, name: &str, expected: Option<(usize, usize)>) -> Result<Matrix> {
    let m = tensors.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    match expected {
        Some(e) if e != m.shape() => Err(Error::TensorShape { name: name.to_string(), found: m.shape(), expected: e }),
        _ => Ok(m),
    }
}

fn apply(model: &mut Model, contents: &mut Contents) -> Result<()> {
    let tensors = &mut contents.tensors;
    for p in model.params_mut() {
        let m = take_tensor(tensors, &p.name().to_string(), Some(p.value.shape()))?;
        p.value = m;
    }
    let d = model.config().d_model;
    let capacity = model.config().bank_capacity;
    for (i, layer) in model.layers.iter_mut().enumerate() {
        match &mut layer.routing {
            Routing::Cluster { centroids, bank } => {
                let name = format!("layer{i}.centroids");
                let v = take_tensor(tensors, &name, Some(centroids.vectors().shape()))?;
                let epoch = contents.meta.epochs.get(&i).copied().unwrap_or(0);
                *centroids = Centroids::from_ordered(v, epoch)?;
                let rows = take_tensor(tensors, &format!("layer{i}.bank"), None)?;
                if rows.rows() > 0 && rows.cols() != d {
                    return Err(Error::TensorShape {
                        name: format!("layer{i}.bank"),
                        found: rows.shape(),
                        expected: (rows.rows(), d),
                    });
                }
                *bank = MemoryBank::restore(d, capacity, &rows)?;
            }
            Routing::Hash(h) => {
                let name = format!("layer{i}.hash");
                *h = LshHasher::from_vectors(take_tensor(tensors, &name, Some(h.vectors().shape()))?)?;
            }
            Routing::Window | Routing::Position => {}
        }
    }
    Ok(())
}

fn restore_train(model: &Model, contents: &mut Contents) -> Result<Option<TrainState>> {
    let Some(t) = contents.meta.train.take() else { return Ok(None) };
    let mut moments = BTreeMap::new();
    for p in model.params() {
        let first = format!("adam.first.{}", p.name());
        if !contents.tensors.contains_key(&first) {
            continue;
        }
        let first = take_tensor(&mut contents.tensors, &first, Some(p.value.shape()))?;
        let second = take_tensor(&mut contents.tensors, &format!("adam.second.{}", p.name()), Some(p.value.shape()))?;
        moments.insert(p.name().to_string(), Moments { first, second });
    }
    let mut adam = AdamState::new(t.lr);
    adam.beta1 = t.beta1;
    adam.beta2 = t.beta2;
    adam.eps = t.eps;
    adam.restore(t.adam_step, moments);
    let mut rng = ChaCha8Rng::from_seed(t.rng_seed);
    rng.set_stream(t.rng_stream);
    rng.set_word_pos(t.rng_word_pos.parse().map_err(|_| Error::Corrupt("bad RNG position".into()))?);
    Ok(Some(TrainState { adam, rng, iteration: t.iteration }))
}

fn check_consumed(contents: &Contents) -> Result<()> {
    match contents.tensors.keys().next() {
        Some(extra) => Err(Error::Corrupt(format!("unexpected tensor `{extra}`"))),
        None => Ok(()),
    }
}

/// Rebuilds the model (and training state, if saved) described by a checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Option<TrainState>)> {
    let mut contents = decode(bytes)?;
    let mut model = Model::new(contents.meta.model.clone())?;
    apply(&mut model, &mut contents)?;
    let train = restore_train(&model, &mut contents)?;
    check_consumed(&contents)?;
    Ok((model, train))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<TrainState>)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads saved weights and routing state into an already-built model; every
/// tensor must match the model's shapes.
pub fn load_weights_into(path: &Path, model: &mut Model) -> Result<()> {
    let mut contents = decode(&fs::read(path)?)?;
    apply(model, &mut contents)
}
