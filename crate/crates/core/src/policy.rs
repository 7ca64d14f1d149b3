//! Cache refresh policies and the attention-drift machinery.
//!
//! The adaptive policy tracks, per layer, the decoded tokens that receive
//! the most attention from the prediction window. Those tokens are injected
//! into the next step's query set so that fresh attention rows exist for
//! them; the cosine between a token's consecutive rows is the drift signal
//! that decides where recomputation starts.

use std::collections::BTreeMap;

use crate::error::{EdlmError, Result};
use crate::kernel::{cosine_similarity, Matrix};

/// Which refresh policy drives a decode run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Full recompute of every token and layer at every step; the oracle.
    NoCache,
    /// Full cache refresh every `interval` steps, pure reuse otherwise.
    FixedInterval,
    /// Freeze everything outside the current block; refresh when a block
    /// finishes decoding.
    BlockWise,
    /// Attention-aware, layer-aware adaptive refresh.
    Elastic,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::NoCache => "no_cache",
            Self::FixedInterval => "fixed_interval",
            Self::BlockWise => "block_wise",
            Self::Elastic => "elastic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no_cache" => Ok(Self::NoCache),
            "fixed_interval" => Ok(Self::FixedInterval),
            "block_wise" => Ok(Self::BlockWise),
            "elastic" => Ok(Self::Elastic),
            other => Err(EdlmError::config(format!("unknown policy '{other}'"))),
        }
    }
}

/// Policy hyperparameters. Fields not used by a given kind are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Drift trigger threshold in (0, 1].
    pub gamma: f32,
    /// Sliding window size.
    pub beta: usize,
    /// Confidence threshold for parallel unmasking, in (0, 1].
    pub eps: f32,
    /// Tracked tokens per layer.
    pub top_k: usize,
    /// Refresh period for `FixedInterval`.
    pub interval: usize,
    /// Block length for `BlockWise`.
    pub block_size: usize,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            gamma: 0.9,
            beta: 16,
            eps: 0.9,
            top_k: 1,
            interval: 8,
            block_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EdlmError::config("gamma must be in (0, 1]"));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(EdlmError::config("eps must be in (0, 1]"));
        }
        if self.beta == 0 {
            return Err(EdlmError::config("beta must be >= 1"));
        }
        if self.top_k == 0 {
            return Err(EdlmError::config("top_k must be >= 1"));
        }
        if self.kind == PolicyKind::FixedInterval && self.interval == 0 {
            return Err(EdlmError::config("interval must be >= 1"));
        }
        if self.kind == PolicyKind::BlockWise && self.block_size == 0 {
            return Err(EdlmError::config("block_size must be >= 1"));
        }
        Ok(())
    }
}

/// Attention rows stored for one layer at one step: tracked token index ->
/// head-averaged row over all positions.
pub type TrackedRows = BTreeMap<usize, Vec<f32>>;

/// Per-step record of tracked tokens and their attention rows.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub step: u64,
    /// Top-k most-attended tokens per layer, descending by attention mass.
    pub tracked_per_layer: Vec<Vec<usize>>,
    /// Union of tracked tokens across layers, ascending.
    pub tracked_union: Vec<usize>,
    /// Rows for union tokens at each layer, where available this step.
    pub rows_per_layer: Vec<TrackedRows>,
}

impl AttentionRecord {
    pub fn empty(num_layers: usize) -> Self {
        Self {
            step: 0,
            tracked_per_layer: vec![Vec::new(); num_layers],
            tracked_union: Vec::new(),
            rows_per_layer: vec![TrackedRows::new(); num_layers],
        }
    }
}

/// The `k` decoded positions with the largest attention column sums over the
/// window queries, descending; ties break to the lowest index. Also returns
/// the column sums (attention mass) for each selected position.
pub fn most_attended(
    s_window_avg: &Matrix,
    decoded: &[usize],
    k: usize,
) -> Result<Vec<(usize, f32)>> {
    if decoded.is_empty() {
        return Err(EdlmError::config(
            "most_attended requires a non-empty decoded set",
        ));
    }
    let mut sums: Vec<(usize, f32)> = decoded
        .iter()
        .map(|&col| {
            let mut acc = 0.0f32;
            for r in 0..s_window_avg.rows() {
                acc += s_window_avg.get(r, col);
            }
            (col, acc)
        })
        .collect();
    // Descending mass, ascending index on ties. Indices are unique, so the
    // index tiebreak makes the order total and deterministic.
    sums.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    sums.truncate(k);
    Ok(sums)
}

/// Cosine drift test between consecutive-step attention rows of tracked
/// tokens.
///
/// Only tokens present in both row sets are compared; their rows are
/// concatenated in ascending token order before the cosine. An empty
/// intersection reports no drift (sigma 1.0).
pub fn drift_test(prev_rows: &TrackedRows, cur_rows: &TrackedRows, gamma: f32) -> (f32, bool) {
    let mut prev_cat = Vec::new();
    let mut cur_cat = Vec::new();
    for (token, prev) in prev_rows {
        if let Some(cur) = cur_rows.get(token) {
            prev_cat.extend_from_slice(prev);
            cur_cat.extend_from_slice(cur);
        }
    }
    if prev_cat.is_empty() {
        return (1.0, false);
    }
    let sigma = cosine_similarity(&prev_cat, &cur_cat).expect("equal lengths by construction");
    (sigma, sigma < gamma)
}
