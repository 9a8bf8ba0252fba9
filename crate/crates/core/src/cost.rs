//! Exact memory model and deterministic work tallies.

use crate::chunker::ChunkPlan;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

const F64_BYTES: usize = 8;

/// Bytes of K and V for `rows` cached tokens across all layers and heads.
pub fn kv_bytes(cfg: &ModelConfig, rows: usize) -> usize {
    rows * cfg.n_layers * cfg.n_heads * cfg.d_head * F64_BYTES * 2
}

/// Transient working set of encoding a window of `window_len` tokens:
/// residual stream plus its normalized copy, the feed-forward hidden layer,
/// and one row of attention scores per head. It does not depend on the KV
/// budget.
pub fn activation_bytes(cfg: &ModelConfig, window_len: usize) -> usize {
    window_len * cfg.d_model * F64_BYTES * (2 + cfg.ff_mult) + cfg.n_heads * window_len * F64_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkFootprint {
    /// Rows kept per head after eviction (context + query).
    pub kv_rows: usize,
    pub kv_bytes: usize,
    pub activation_bytes: usize,
}

impl ChunkFootprint {
    pub fn total(&self) -> usize {
        self.kv_bytes + self.activation_bytes
    }

    pub fn kv_fraction(&self) -> f64 {
        self.kv_bytes as f64 / self.total() as f64
    }
}

/// Footprint of one full-width chunk whose context is compressed to
/// `kv_budget` rows per head.
pub fn chunk_footprint(cfg: &ModelConfig, chunk_width: usize, query_len: usize, kv_budget: usize) -> ChunkFootprint {
    let kv_rows = kv_budget.min(chunk_width) + query_len;
    ChunkFootprint {
        kv_rows,
        kv_bytes: kv_bytes(cfg, kv_rows),
        activation_bytes: activation_bytes(cfg, chunk_width + query_len),
    }
}

/// How many chunks fit side by side in `budget_bytes`.
pub fn max_parallel_chunks(budget_bytes: usize, footprint: &ChunkFootprint) -> Result<usize> {
    if budget_bytes == 0 {
        return Err(Error::config("memory budget must be > 0"));
    }
    Ok(budget_bytes / footprint.total())
}

/// Causal q.k evaluations for one window of `len` tokens over all layers
/// and heads.
pub fn causal_pairs(cfg: &ModelConfig, len: usize) -> u64 {
    (cfg.n_layers * cfg.n_heads) as u64 * (len as u64 * (len as u64 + 1) / 2)
}

/// Closed-form count of the local encoding stage for a plan.
pub fn expected_prefill_pairs(cfg: &ModelConfig, plan: &ChunkPlan) -> u64 {
    plan.ranges()
        .iter()
        .map(|r| causal_pairs(cfg, r.len() + plan.query_len()))
        .sum()
}

/// Deterministic counters for a run plus wall-clock timings (reported only).
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    /// q.k evaluations during parallel chunk encoding, as counted on the
    /// attention path.
    pub score_pairs_prefill: u64,
    /// Same quantity from the plan's closed form.
    pub score_pairs_prefill_expected: u64,
    /// q.k evaluations in the global stage (query and decoding).
    pub score_pairs_global: u64,
    /// Peak cached K/V rows, summed over layers and heads.
    pub cache_rows_peak: usize,
    /// `cache_rows_peak` in bytes (K and V, f64).
    pub cache_bytes_peak: usize,
    /// Cache bytes plus the activation working set of the chunks in flight.
    pub simulated_memory_bytes_peak: usize,
    pub wall_prefill_ms: f64,
    /// NaN when nothing was decoded.
    pub wall_per_token_ms: f64,
}

impl CostReport {
    /// The counter lines only, one `key=value` per line.
    pub fn deterministic_record(&self) -> String {
        format!(
            "score_pairs_prefill={}\nscore_pairs_prefill_expected={}\nscore_pairs_global={}\ncache_rows_peak={}\ncache_bytes_peak={}\nsimulated_memory_bytes_peak={}\n",
            self.score_pairs_prefill,
            self.score_pairs_prefill_expected,
            self.score_pairs_global,
            self.cache_rows_peak,
            self.cache_bytes_peak,
            self.simulated_memory_bytes_peak,
        )
    }
}

/// Rows per head <-> bytes, for callers that tally rows summed over heads
/// and layers already.
pub fn row_bytes(cfg: &ModelConfig, rows_all_heads: usize) -> usize {
    rows_all_heads * cfg.d_head * F64_BYTES * 2
}
