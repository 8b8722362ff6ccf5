//! Multi-head self-attention and the post-norm Transformer layer, applied to
//! arbitrary token groups (window chunks, cluster chunks, position groups).

mod cost;
mod layer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub use cost::{attention_cost, AttentionPattern};
pub use layer::{multi_head_attention, transformer_layer, LayerCache, TransformerWeights};

/// Hyper-parameters shared by every Transformer sublayer in a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize, ffn_dim: usize) -> Self {
        Self { d_model, heads, ffn_dim, dropout: 0.0, causal: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Invalid("d_model, heads and ffn_dim must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mask(&self) -> MaskSpec {
        if self.causal {
            MaskSpec::CausalByPosition
        } else {
            MaskSpec::None
        }
    }
}

/// Which keys a query may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskSpec {
    #[default]
    None,
    /// Key `j` is visible from query `i` iff `pos[j] <= pos[i]`, comparing positions in the
    /// original (pre-chunk, pre-sort) sequence.
    CausalByPosition,
}

impl MaskSpec {
    #[inline]
    pub fn visible(self, query_pos: i64, key_pos: i64) -> bool {
        match self {
            MaskSpec::None => true,
            MaskSpec::CausalByPosition => key_pos <= query_pos,
        }
    }
}

/// Rows of hidden states together with their positions in the full sequence.
///
/// Context tokens carry their absolute index; question tokens carry negative
/// sentinels `-q..-1`, so under a causal mask they are visible to every context token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGroup {
    pub states: Matrix,
    pub positions: Vec<i64>,
}

impl TokenGroup {
    pub fn new(states: Matrix, positions: Vec<i64>) -> Result<Self> {
        if states.rows() != positions.len() {
            return Err(Error::shape(
                "TokenGroup::new",
                format!("{} rows but {} positions", states.rows(), positions.len()),
            ));
        }
        Ok(Self { states, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Sentinel position for question token `j` of `q`.
#[inline]
pub fn question_position(j: usize, q: usize) -> i64 {
    j as i64 - q as i64
}
