use serde::{Deserialize, Serialize};

/// Attention sparsity pattern for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionPattern {
    Full,
    Sliding,
    Cluster,
    Lsh,
    SparsePosition,
}

impl AttentionPattern {
    pub const ALL: [AttentionPattern; 5] = [
        AttentionPattern::Full,
        AttentionPattern::Sliding,
        AttentionPattern::Cluster,
        AttentionPattern::Lsh,
        AttentionPattern::SparsePosition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionPattern::Full => "full",
            AttentionPattern::Sliding => "sliding",
            AttentionPattern::Cluster => "cluster",
            AttentionPattern::Lsh => "lsh",
            AttentionPattern::SparsePosition => "sparse-position",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Multiply-accumulate count of the score computation (`QKᵀ`) of one layer.
///
/// `x` context tokens, `q` question tokens, window `l`, stride `m`, width `d`.
/// Chunks are charged at full size, so ragged tails are over-counted; the
/// counts are the closed forms, not a trace of the ragged computation.
pub fn attention_cost(pattern: AttentionPattern, x: u64, q: u64, l: u64, m: u64, d: u64) -> u64 {
    assert!(x > 0 && l > 0 && m > 0 && m <= l, "need x > 0 and 0 < m <= l");
    let chunks = x.div_ceil(m);
    let flat = q * chunks + x;
    match pattern {
        AttentionPattern::Full => (q + x) * (q + x) * d,
        AttentionPattern::Sliding => chunks * (q + l) * (q + l) * d,
        AttentionPattern::Cluster | AttentionPattern::Lsh => flat.div_ceil(m) * m * m * d,
        // q+m groups, each holding one row per chunk
        AttentionPattern::SparsePosition => (q + m) * chunks * chunks * d,
    }
}
