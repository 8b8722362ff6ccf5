//! Token embedding, a scheduled stack of window and routed layers, and a
//! token-classification head, with a hand-written backward pass.
//!
//! In QA mode only the last context token is read out, so layers above the
//! last routed layer evaluate only the chunks that can reach it. Routed layers
//! need their whole input to build a route, so every layer below them runs in full.
//! Chunks that are skipped pass their input through unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{AttentionConfig, LayerCache, TokenGroup, TransformerWeights};
use crate::baselines::{lsh_assign, sparse_position_route, LshHasher};
use crate::clustering::{assign_clusters, gather_groups, scatter_back, Centroids, ClusterRoute, MemoryBank};
use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, Matrix, Parameter};
use crate::sliding::{plan_chunks, scatter_merge, ChunkLayout, LayerState};

use super::config::{LayerKind, ModelConfig, Mode};
use super::data::Example;

/// Routing state owned by one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    Window,
    Cluster { centroids: Centroids, bank: MemoryBank },
    Hash(LshHasher),
    Position,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: TransformerWeights,
    pub routing: Routing,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    attn: AttentionConfig,
    pub embed: Parameter,
    pub layers: Vec<Layer>,
    pub head_w: Parameter,
    pub head_b: Parameter,
}

/// Mixes a base seed with a tag so each consumer gets an independent stream.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `scale · [sin, cos]` encoding of `positions`, interleaved across `d` columns.
pub fn sinusoidal_positions(positions: std::ops::Range<usize>, d: usize, scale: f64) -> Matrix {
    let mut out = Matrix::zeros(positions.len(), d);
    for (r, pos) in positions.enumerate() {
        let row = out.row_mut(r);
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            row[i] = scale * if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Per-run switches for [`Model::forward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Enables dropout, with per-chunk streams derived from this seed.
    pub dropout_seed: Option<u64>,
    /// Keep activation caches for a backward pass.
    pub keep_cache: bool,
    /// Reuse these routes instead of recomputing them (one entry per layer).
    pub routes: Option<&'a [Option<ClusterRoute>]>,
    /// Evaluate every chunk even when the readout cannot see it.
    pub full: bool,
}

/// What one layer evaluated during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub route: Option<ClusterRoute>,
    /// Input rows of a cluster-former layer, flattened, for its memory bank.
    pub bank_rows: Option<Matrix>,
    /// Per chunk or group; `None` where the chunk was skipped or caches were not kept.
    caches: Vec<Option<LayerCache>>,
    /// Per chunk or group: whether it was evaluated.
    pub active: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub layout: ChunkLayout,
    pub layers: Vec<LayerTrace>,
    pub output: LayerState,
}

impl Trace {
    pub fn routes(&self) -> Vec<Option<ClusterRoute>> {
        self.layers.iter().map(|l| l.route.clone()).collect()
    }
}

/// Loss summary over the scored positions of one example.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub nll_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl LossStats {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.count.max(1) as f64
    }

    pub fn merge(&mut self, other: LossStats) {
        self.nll_sum += other.nll_sum;
        self.correct += other.correct;
        self.count += other.count;
    }
}

/// Which parts of each layer the readout depends on.
enum Demand {
    All,
    Chunks(Vec<bool>),
    /// Needed output rows of a routed layer, in flattened order.
    Rows(Vec<bool>),
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let attn = cfg.attention();
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embed = Parameter::new("embed.tokens", Matrix::random_normal(cfg.vocab, d, 1.0, &mut rng));
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for (i, &kind) in cfg.schedule.iter().enumerate() {
            let weights = TransformerWeights::new(&format!("layer{i}"), &attn, &mut rng);
            let tag = derive_seed(cfg.seed, i as u64 + 1);
            let routing = match kind {
                LayerKind::SlidingWindow => Routing::Window,
                LayerKind::ClusterFormer => Routing::Cluster {
                    centroids: Centroids::random(cfg.clusters, d, tag)?,
                    bank: MemoryBank::new(d, cfg.bank_capacity),
                },
                LayerKind::Lsh => Routing::Hash(LshHasher::new(cfg.hashes, d, tag)?),
                LayerKind::SparsePosition => Routing::Position,
            };
            layers.push(Layer { kind, weights, routing });
        }
        let head_w = Parameter::new(
            "head.w",
            Matrix::random_normal(d, cfg.vocab, 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let head_b = Parameter::new("head.b", Matrix::zeros(1, cfg.vocab));
        Ok(Self { cfg, attn, embed, layers, head_w, head_b })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn attention_config(&self) -> &AttentionConfig {
        &self.attn
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.embed];
        for l in &self.layers {
            v.extend(l.weights.params());
        }
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.embed];
        for l in &mut self.layers {
            v.extend(l.weights.params_mut());
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    pub fn layout_for(&self, ex: &Example) -> Result<ChunkLayout> {
        plan_chunks(ex.question.len(), ex.tokens.len(), self.cfg.window, self.cfg.stride)
    }

    fn check_tokens(&self, ex: &Example) -> Result<()> {
        if let Some(t) = ex.max_token().filter(|&t| t as usize >= self.cfg.vocab) {
            return Err(Error::OutOfRange { index: t as usize, len: self.cfg.vocab });
        }
        match self.cfg.mode {
            Mode::QaEncoder if ex.label.is_none() => Err(Error::Invalid("QA example without a label".into())),
            Mode::CausalLm if ex.tokens.len() < 2 => Err(Error::Invalid("LM example needs 2+ tokens".into())),
            _ => Ok(()),
        }
    }

    /// Token embeddings plus scaled sinusoidal positions over `[question; context]`.
    pub fn embed(&self, ex: &Example) -> Result<LayerState> {
        self.check_tokens(ex)?;
        let layout = self.layout_for(ex)?;
        let d = self.cfg.d_model;
        let (q, x) = (ex.question.len(), ex.tokens.len());
        let pos = sinusoidal_positions(0..q + x, d, self.cfg.position_scale);
        let row = |tok: u32, p: usize| -> Vec<f64> {
            self.embed.value.row(tok as usize).iter().zip(pos.row(p)).map(|(a, b)| a + b).collect()
        };
        let question = Matrix::from_rows(&ex.question.iter().enumerate().map(|(j, &t)| row(t, j)).collect::<Vec<_>>());
        let question = if q == 0 { Matrix::zeros(0, d) } else { question };
        let context = Matrix::from_rows(&ex.tokens.iter().enumerate().map(|(t, &tok)| row(tok, q + t)).collect::<Vec<_>>());
        LayerState::new(&question, context, layout)
    }

    fn plan_demand(&self, layout: &ChunkLayout, full: bool) -> Vec<Demand> {
        let n = self.layers.len();
        if full || self.cfg.mode == Mode::CausalLm {
            return (0..n).map(|_| Demand::All).collect();
        }
        let mut need_q = vec![false; layout.chunks];
        let mut need_ctx = vec![false; layout.x];
        need_ctx[layout.x - 1] = true;
        let mut plan: Vec<Demand> = Vec::with_capacity(n);
        for layer in self.layers.iter().rev() {
            if layer.kind.is_routed() {
                let mut rows = Vec::with_capacity(layout.flat_len());
                for k in 0..layout.chunks {
                    rows.extend(std::iter::repeat_n(need_q[k], layout.q));
                    rows.extend(layout.flat_slice(k).map(|t| need_ctx[t]));
                }
                plan.push(Demand::Rows(rows));
                while plan.len() < n {
                    plan.push(Demand::All);
                }
                break;
            }
            let active: Vec<bool> =
                (0..layout.chunks).map(|k| need_q[k] || layout.slice(k).any(|t| need_ctx[t])).collect();
            need_q.clone_from(&active);
            need_ctx.fill(false);
            for k in (0..layout.chunks).filter(|&k| active[k]) {
                layout.slice(k).for_each(|t| need_ctx[t] = true);
            }
            plan.push(Demand::Chunks(active));
        }
        plan.reverse();
        plan
    }

    fn route_for(&self, i: usize, flat: &TokenGroup, layout: &ChunkLayout) -> Result<ClusterRoute> {
        match &self.layers[i].routing {
            Routing::Cluster { centroids, .. } => ClusterRoute::new(assign_clusters(&flat.states, centroids)?, layout.m),
            Routing::Hash(h) => ClusterRoute::new(lsh_assign(&flat.states, h)?, layout.m),
            Routing::Position => Ok(sparse_position_route(layout)),
            Routing::Window => Err(Error::Invalid(format!("layer {i} is not routed"))),
        }
    }

    fn encode_chunk(
        &self,
        i: usize,
        k: usize,
        group: TokenGroup,
        active: bool,
        opts: &RunOptions,
    ) -> Result<(Matrix, Option<LayerCache>)> {
        if !active {
            return Ok((group.states, None));
        }
        let w = &self.layers[i].weights;
        let mask = self.attn.mask();
        let mut rng = opts
            .dropout_seed
            .map(|s| ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(s, i as u64), k as u64)));
        if opts.keep_cache || rng.is_some() {
            let (out, cache) = w.forward(&group, &self.attn, mask, rng.as_mut())?;
            Ok((out, opts.keep_cache.then_some(cache)))
        } else {
            Ok((w.forward::<ChaCha8Rng>(&group, &self.attn, mask, None)?.0, None))
        }
    }

    /// Runs the layer stack over one example.
    pub fn forward(&self, ex: &Example, opts: &RunOptions) -> Result<Trace> {
        let mut state = self.embed(ex)?;
        let layout = state.layout;
        let demand = self.plan_demand(&layout, opts.full);
        let mut traces = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.kind.is_routed() {
                let active: Vec<bool> = match &demand[i] {
                    Demand::Chunks(a) => a.clone(),
                    _ => vec![true; layout.chunks],
                };
                let results: Vec<(Matrix, Option<LayerCache>)> = (0..layout.chunks)
                    .into_par_iter()
                    .map(|k| self.encode_chunk(i, k, state.gather_chunk(k)?, active[k], opts))
                    .collect::<Result<_>>()?;
                let (outs, caches): (Vec<Matrix>, Vec<_>) = results.into_iter().unzip();
                state = scatter_merge(&outs, layout)?;
                traces.push(LayerTrace { route: None, bank_rows: None, caches, active });
                continue;
            }
            let flat = state.flatten();
            let route = match opts.routes.and_then(|r| r.get(i).cloned().flatten()) {
                Some(r) if r.len() == flat.len() => r,
                Some(r) => {
                    return Err(Error::shape(
                        "forward",
                        format!("fixed route for layer {i} covers {} rows, state has {}", r.len(), flat.len()),
                    ))
                }
                None => self.route_for(i, &flat, &layout)?,
            };
            let active: Vec<bool> = match &demand[i] {
                Demand::Rows(need) => route.groups().map(|g| g.iter().any(|&r| need[r])).collect(),
                _ => vec![true; route.chunk_count()],
            };
            let results: Vec<(Matrix, Option<LayerCache>)> = gather_groups(&flat, &route)
                .into_par_iter()
                .enumerate()
                .map(|(k, g)| self.encode_chunk(i, k, g, active[k], opts))
                .collect::<Result<_>>()?;
            let (outs, caches): (Vec<Matrix>, Vec<_>) = results.into_iter().unzip();
            state = LayerState::unflatten(&scatter_back(&outs, &route)?, layout)?;
            let bank_rows = matches!(layer.routing, Routing::Cluster { .. }).then_some(flat.states);
            traces.push(LayerTrace { route: Some(route), bank_rows, caches, active });
        }
        Ok(Trace { layout, layers: traces, output: state })
    }

    /// Hidden states that the head scores, with their target tokens.
    fn scored_rows(&self, ex: &Example) -> (Vec<usize>, Vec<u32>) {
        match self.cfg.mode {
            Mode::QaEncoder => (vec![ex.tokens.len() - 1], vec![ex.label.expect("checked in embed")]),
            Mode::CausalLm => ((0..ex.tokens.len() - 1).collect(), ex.tokens[1..].to_vec()),
        }
    }

    /// Logits for every scored row.
    pub fn logits(&self, trace: &Trace, ex: &Example) -> Result<Matrix> {
        let (rows, _) = self.scored_rows(ex);
        let h = trace.output.context.gather_rows(&rows);
        let mut logits = h.matmul(&self.head_w.value)?;
        logits.add_row_broadcast(self.head_b.value.data());
        Ok(logits)
    }

    /// Mean cross-entropy over scored rows and its gradient with respect to the
    /// final layer state, scaled by `scale`. Head gradients are accumulated.
    pub fn loss_and_output_grad(&mut self, trace: &Trace, ex: &Example, scale: f64) -> Result<(LossStats, LayerState)> {
        let (rows, targets) = self.scored_rows(ex);
        let h = trace.output.context.gather_rows(&rows);
        let mut logits = h.matmul(&self.head_w.value)?;
        logits.add_row_broadcast(self.head_b.value.data());
        let stats = score(&logits, &targets);
        if !stats.nll_sum.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let n = rows.len() as f64;
        let mut d_logits = logits;
        for (r, &t) in targets.iter().enumerate() {
            let row = d_logits.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp() * scale / n);
            row[t as usize] -= scale / n;
        }
        self.head_w.grad.add_assign(&h.t_matmul(&d_logits)?);
        d_logits.col_sums_into(self.head_b.grad.data_mut());
        let d_h = d_logits.matmul_t(&self.head_w.value)?;
        let mut d_out = trace.output.zeros_like();
        for (i, &r) in rows.iter().enumerate() {
            d_out.context.row_mut(r).copy_from_slice(d_h.row(i));
        }
        Ok((stats, d_out))
    }

    /// Backpropagates `d_out` through the stack and the embedding, accumulating
    /// parameter gradients. Chunks whose upstream gradient is zero are skipped.
    pub fn backward(&mut self, trace: &Trace, ex: &Example, d_out: LayerState) -> Result<()> {
        let layout = trace.layout;
        let counts = layout.cover_counts();
        let attn = self.attn;
        let mut grad = d_out;
        for (i, lt) in trace.layers.iter().enumerate().rev() {
            let weights = &mut self.layers[i].weights;
            let mut d_in = grad.zeros_like();
            match &lt.route {
                None => {
                    for k in 0..layout.chunks {
                        let d_chunk = grad.merge_grad_for_chunk(k, &counts);
                        if d_chunk.is_zero() {
                            continue;
                        }
                        let dx = match (&lt.caches[k], lt.active[k]) {
                            (Some(cache), _) => weights.backward(cache, &attn, &d_chunk),
                            (None, false) => d_chunk,
                            (None, true) => return Err(missing_cache(i)),
                        };
                        d_in.accumulate_chunk(k, &dx);
                    }
                }
                Some(route) => {
                    let d_flat = grad.flatten().states;
                    let mut d_in_flat = Matrix::zeros(d_flat.rows(), d_flat.cols());
                    for (k, idx) in route.groups().enumerate() {
                        let d_g = d_flat.gather_rows(idx);
                        if d_g.is_zero() {
                            continue;
                        }
                        let dx = match (&lt.caches[k], lt.active[k]) {
                            (Some(cache), _) => weights.backward(cache, &attn, &d_g),
                            (None, false) => d_g,
                            (None, true) => return Err(missing_cache(i)),
                        };
                        for (r, &dst) in idx.iter().enumerate() {
                            d_in_flat.row_mut(dst).copy_from_slice(dx.row(r));
                        }
                    }
                    d_in = LayerState::unflatten(&d_in_flat, layout)?;
                }
            }
            grad = d_in;
        }
        let g = &mut self.embed.grad;
        for (t, &tok) in ex.tokens.iter().enumerate() {
            crate::nn::axpy(1.0, grad.context.row(t), g.row_mut(tok as usize));
        }
        for qk in &grad.questions {
            for (j, &tok) in ex.question.iter().enumerate() {
                crate::nn::axpy(1.0, qk.row(j), g.row_mut(tok as usize));
            }
        }
        Ok(())
    }

    /// Inference-mode loss statistics for one example.
    pub fn score_example(&self, ex: &Example) -> Result<LossStats> {
        let trace = self.forward(ex, &RunOptions::default())?;
        let (_, targets) = self.scored_rows(ex);
        Ok(score(&self.logits(&trace, ex)?, &targets))
    }

    /// Forward, loss and backward for one example; gradients are accumulated
    /// with weight `scale`. Returns the trace so callers can feed memory banks.
    pub fn accumulate_gradients(
        &mut self,
        ex: &Example,
        scale: f64,
        dropout_seed: Option<u64>,
        routes: Option<&[Option<ClusterRoute>]>,
    ) -> Result<(LossStats, Trace)> {
        let opts = RunOptions { dropout_seed, keep_cache: true, routes, full: false };
        let trace = self.forward(ex, &opts)?;
        let (stats, d_out) = self.loss_and_output_grad(&trace, ex, scale)?;
        self.backward(&trace, ex, d_out)?;
        Ok((stats, trace))
    }

    /// Centroids of every cluster-former layer, by layer index.
    pub fn centroids(&self) -> Vec<(usize, &Centroids)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match &l.routing {
                Routing::Cluster { centroids, .. } => Some((i, centroids)),
                _ => None,
            })
            .collect()
    }
}

fn missing_cache(layer: usize) -> Error {
    Error::Invalid(format!("layer {layer} was run without caches; backward needs keep_cache"))
}

fn score(logits: &Matrix, targets: &[u32]) -> LossStats {
    let mut s = LossStats { count: targets.len(), ..Default::default() };
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        s.nll_sum += log_sum_exp(row) - row[t as usize];
        // argmax with lowest index on ties
        let pred = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        s.correct += usize::from(pred == t as usize);
    }
    s
}
