//! Sliding-window layer: overlapping chunks of the context, each prefixed with
//! the question, encoded independently and averaged back where they overlap.
//!
//! The layer state is deduplicated: one row per context token plus one
//! question copy per chunk. After a merge, every chunk that re-gathers an
//! overlapping token reads the same row, which is exactly what in-place
//! averaging of neighbouring chunk outputs would leave behind.

use std::ops::Range;

use rayon::prelude::*;

use crate::attention::{question_position, AttentionConfig, MaskSpec, TokenGroup, TransformerWeights};
use crate::error::{Error, Result};
use crate::nn::{axpy, Matrix};

/// Window `l` and stride `m` over `x` context tokens, with `q` question tokens per chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    pub q: usize,
    pub x: usize,
    pub l: usize,
    pub m: usize,
    pub chunks: usize,
}

/// Computes the chunk layout. `chunks = ⌈x/m⌉`; chunk `k` covers `[m·k, min(m·k+l, x))`.
pub fn plan_chunks(q: usize, x: usize, l: usize, m: usize) -> Result<ChunkLayout> {
    if x == 0 {
        return Err(Error::Invalid("context length must be at least 1".into()));
    }
    if m == 0 || m > l {
        return Err(Error::Invalid(format!("stride {m} must satisfy 0 < m <= window {l}")));
    }
    Ok(ChunkLayout { q, x, l, m, chunks: x.div_ceil(m) })
}

impl ChunkLayout {
    /// Context slice of chunk `k`.
    pub fn slice(&self, k: usize) -> Range<usize> {
        let start = self.m * k;
        start..(start + self.l).min(self.x)
    }

    /// Rows chunk `k` contributes to the flattened sequence: its first `m` context tokens.
    pub fn flat_slice(&self, k: usize) -> Range<usize> {
        let start = self.m * k;
        start..(start + self.m).min(self.x)
    }

    /// Number of logical rows, `q·K + x`.
    pub fn flat_len(&self) -> usize {
        self.q * self.chunks + self.x
    }

    /// How many chunks cover each context position.
    pub fn cover_counts(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.x];
        for k in 0..self.chunks {
            for t in self.slice(k) {
                c[t] += 1;
            }
        }
        c
    }

    /// Original-sequence positions of the rows of chunk `k`.
    pub fn chunk_positions(&self, k: usize) -> Vec<i64> {
        (0..self.q)
            .map(|j| question_position(j, self.q))
            .chain(self.slice(k).map(|t| t as i64))
            .collect()
    }
}

/// Hidden states between layers: `chunks` question copies and one row per context token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub questions: Vec<Matrix>,
    pub context: Matrix,
    pub layout: ChunkLayout,
}

impl LayerState {
    /// Initial state: the question block replicated into every chunk.
    pub fn new(question: &Matrix, context: Matrix, layout: ChunkLayout) -> Result<Self> {
        if question.rows() != layout.q || context.rows() != layout.x {
            return Err(Error::shape(
                "LayerState::new",
                format!("question {} / context {} rows for layout {layout:?}", question.rows(), context.rows()),
            ));
        }
        if layout.q > 0 && question.cols() != context.cols() {
            return Err(Error::shape("LayerState::new", "question and context widths differ"));
        }
        Ok(Self { questions: vec![question.clone(); layout.chunks], context, layout })
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.width();
        Self {
            questions: vec![Matrix::zeros(self.layout.q, d); self.layout.chunks],
            context: Matrix::zeros(self.layout.x, d),
            layout: self.layout,
        }
    }

    pub fn width(&self) -> usize {
        self.context.cols()
    }

    /// Rows `[Q_k; X[slice(k)]]` with their original positions.
    pub fn gather_chunk(&self, k: usize) -> Result<TokenGroup> {
        if k >= self.layout.chunks {
            return Err(Error::OutOfRange { index: k, len: self.layout.chunks });
        }
        let range = self.layout.slice(k);
        let ctx = self.context.slice_rows(range.start, range.end);
        let states = Matrix::vstack(&[&self.questions[k], &ctx])?;
        TokenGroup::new(states, self.layout.chunk_positions(k))
    }

    /// The rows to cluster: `[Q_0; X[0:m]; Q_1; X[m:2m]; …]`, with positions.
    pub fn flatten(&self) -> TokenGroup {
        let d = self.width();
        let t = self.layout.flat_len();
        let mut states = Matrix::zeros(t, d);
        let mut positions = Vec::with_capacity(t);
        let mut r = 0;
        for k in 0..self.layout.chunks {
            for j in 0..self.layout.q {
                states.row_mut(r).copy_from_slice(self.questions[k].row(j));
                positions.push(question_position(j, self.layout.q));
                r += 1;
            }
            for ti in self.layout.flat_slice(k) {
                states.row_mut(r).copy_from_slice(self.context.row(ti));
                positions.push(ti as i64);
                r += 1;
            }
        }
        TokenGroup { states, positions }
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(flat: &Matrix, layout: ChunkLayout) -> Result<Self> {
        if flat.rows() != layout.flat_len() {
            return Err(Error::shape(
                "LayerState::unflatten",
                format!("{} rows, layout needs {}", flat.rows(), layout.flat_len()),
            ));
        }
        let d = flat.cols();
        let mut questions = Vec::with_capacity(layout.chunks);
        let mut context = Matrix::zeros(layout.x, d);
        let mut r = 0;
        for k in 0..layout.chunks {
            questions.push(flat.slice_rows(r, r + layout.q));
            r += layout.q;
            for ti in layout.flat_slice(k) {
                context.row_mut(ti).copy_from_slice(flat.row(r));
                r += 1;
            }
        }
        Ok(Self { questions, context, layout })
    }

    /// Adjoint of [`gather_chunk`](Self::gather_chunk): adds a chunk-shaped gradient into `self`.
    pub fn accumulate_chunk(&mut self, k: usize, rows: &Matrix) {
        let q = self.layout.q;
        for j in 0..q {
            axpy(1.0, rows.row(j), self.questions[k].row_mut(j));
        }
        for (i, t) in self.layout.slice(k).enumerate() {
            axpy(1.0, rows.row(q + i), self.context.row_mut(t));
        }
    }

    /// Adjoint of [`scatter_merge`]: the gradient seen by chunk `k`'s output.
    pub fn merge_grad_for_chunk(&self, k: usize, counts: &[u32]) -> Matrix {
        let q = self.layout.q;
        let range = self.layout.slice(k);
        let mut out = Matrix::zeros(q + range.len(), self.width());
        for j in 0..q {
            out.row_mut(j).copy_from_slice(self.questions[k].row(j));
        }
        for (i, t) in range.enumerate() {
            let c = counts[t] as f64;
            for (o, g) in out.row_mut(q + i).iter_mut().zip(self.context.row(t)) {
                *o = g / c;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &LayerState) -> f64 {
        let mut m = self.context.max_abs_diff(&other.context);
        for (a, b) in self.questions.iter().zip(&other.questions) {
            if a.rows() > 0 {
                m = m.max(a.max_abs_diff(b));
            }
        }
        m
    }
}

/// Averages chunk outputs back into a deduplicated state. Contributions are
/// summed in ascending chunk order and divided by the number of covering chunks.
pub fn scatter_merge(outputs: &[Matrix], layout: ChunkLayout) -> Result<LayerState> {
    if outputs.len() != layout.chunks {
        return Err(Error::shape(
            "scatter_merge",
            format!("{} chunk outputs for {} chunks", outputs.len(), layout.chunks),
        ));
    }
    let d = outputs.first().map_or(0, |o| o.cols());
    let mut context = Matrix::zeros(layout.x, d);
    let mut questions = Vec::with_capacity(layout.chunks);
    for (k, out) in outputs.iter().enumerate() {
        let range = layout.slice(k);
        if out.rows() != layout.q + range.len() || out.cols() != d {
            return Err(Error::shape(
                "scatter_merge",
                format!("chunk {k} output is {:?}, expected ({}, {d})", out.shape(), layout.q + range.len()),
            ));
        }
        questions.push(out.slice_rows(0, layout.q));
        for (i, t) in range.enumerate() {
            axpy(1.0, out.row(layout.q + i), context.row_mut(t));
        }
    }
    for (t, &c) in layout.cover_counts().iter().enumerate() {
        if c > 1 {
            let c = c as f64;
            context.row_mut(t).iter_mut().for_each(|v| *v /= c);
        }
    }
    Ok(LayerState { questions, context, layout })
}

/// Gather → encode → merge, with `encode` run per chunk (in parallel) and
/// allowed to return a side value (e.g. an activation cache) per chunk.
pub fn sliding_window_layer_with<C, F>(state: &LayerState, encode: F) -> Result<(LayerState, Vec<C>)>
where
    C: Send,
    F: Fn(usize, TokenGroup) -> Result<(Matrix, C)> + Sync,
{
    let results: Vec<(Matrix, C)> = (0..state.layout.chunks)
        .into_par_iter()
        .map(|k| encode(k, state.gather_chunk(k)?))
        .collect::<Result<_>>()?;
    let (outs, side): (Vec<Matrix>, Vec<C>) = results.into_iter().unzip();
    Ok((scatter_merge(&outs, state.layout)?, side))
}

/// One sliding-window Transformer layer, inference mode.
pub fn sliding_window_layer(
    state: &LayerState,
    weights: &TransformerWeights,
    cfg: &AttentionConfig,
    mask: MaskSpec,
) -> Result<LayerState> {
    let (out, _) = sliding_window_layer_with(state, |_, group| {
        Ok((crate::attention::transformer_layer(&group, weights, cfg, mask)?.states, ()))
    })?;
    Ok(out)
}
