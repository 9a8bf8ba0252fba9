//! Per-head token eviction inside a chunk.
//!
//! Two selectors act on the cumulative query scores `S`:
//! - compression keeps the `kv_budget` context tokens with the largest `S`;
//! - calibration drops tokens whose `S` exceeds `lambda_mult * mean(S)`, but
//!   only inside the bias regions (sink / middle / recency) scheduled for the
//!   layer.
//!
//! Query rows are never evicted. Retained indices stay in original order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::local::{ChunkState, LayerHeadScores};
use crate::tensor::{top_k_indices, Matrix};

pub const DEFAULT_LAMBDA_MULT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BiasRegion {
    Sink,
    Middle,
    Recency,
}

impl FromStr for BiasRegion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sink" => Ok(Self::Sink),
            "middle" => Ok(Self::Middle),
            "recency" => Ok(Self::Recency),
            other => Err(Error::config(format!(
                "unknown bias region `{other}` (expected sink, middle or recency)"
            ))),
        }
    }
}

impl fmt::Display for BiasRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sink => "sink",
            Self::Middle => "middle",
            Self::Recency => "recency",
        })
    }
}

/// Layers `[start, end)` evict the listed regions under calibration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
    pub regions: Vec<BiasRegion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerSchedule(pub Vec<LayerRange>);

impl LayerSchedule {
    /// Shallow third evicts middle-bias tokens, middle third recency-bias
    /// tokens, deep third sink tokens.
    pub fn thirds(n_layers: usize) -> Self {
        let cut = |k: usize| k * n_layers / 3;
        let bands = [BiasRegion::Middle, BiasRegion::Recency, BiasRegion::Sink];
        Self(
            bands
                .iter()
                .enumerate()
                .filter(|(k, _)| cut(*k) < cut(k + 1))
                .map(|(k, &r)| LayerRange {
                    start: cut(k),
                    end: cut(k + 1),
                    regions: vec![r],
                })
                .collect(),
        )
    }

    /// Every layer evicts every region.
    pub fn all(n_layers: usize) -> Self {
        Self(vec![LayerRange {
            start: 0,
            end: n_layers,
            regions: vec![BiasRegion::Sink, BiasRegion::Middle, BiasRegion::Recency],
        }])
    }

    pub fn regions_for(&self, layer: usize) -> Vec<BiasRegion> {
        let mut out: Vec<BiasRegion> = self
            .0
            .iter()
            .filter(|r| (r.start..r.end).contains(&layer))
            .flat_map(|r| r.regions.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        for r in &self.0 {
            if r.start >= r.end || r.end > n_layers {
                return Err(Error::config(format!(
                    "layer range {}..{} is outside 0..{n_layers}",
                    r.start, r.end
                )));
            }
        }
        Ok(())
    }
}

/// Text form: `start-end:region,region;...` with inclusive layer bounds,
/// e.g. `0-1:middle;2-4:recency;5-7:sink`. Empty string or `none` means no
/// calibration anywhere.
impl FromStr for LayerSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::default());
        }
        let mut ranges = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (span, regions) = part
                .split_once(':')
                .ok_or_else(|| Error::config(format!("schedule entry `{part}` lacks `:`")))?;
            let (a, b) = span.split_once('-').unwrap_or((span, span));
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad layer index in `{part}`")))
            };
            let (start, last) = (parse(a)?, parse(b)?);
            if last < start {
                return Err(Error::config(format!("empty layer range in `{part}`")));
            }
            let regions = regions
                .split(',')
                .map(BiasRegion::from_str)
                .collect::<Result<Vec<_>>>()?;
            ranges.push(LayerRange {
                start,
                end: last + 1,
                regions,
            });
        }
        Ok(Self(ranges))
    }
}

impl fmt::Display for LayerSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|r| {
                let regions: Vec<String> = r.regions.iter().map(ToString::to_string).collect();
                format!("{}-{}:{}", r.start, r.end - 1, regions.join(","))
            })
            .collect();
        f.write_str(&parts.join(";"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictionMode {
    None,
    Compression,
    Calibration,
    Both,
}

impl FromStr for EvictionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "compression" => Ok(Self::Compression),
            "calibration" => Ok(Self::Calibration),
            "both" => Ok(Self::Both),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected none, compression, calibration or both)"
            ))),
        }
    }
}

impl fmt::Display for EvictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Compression => "compression",
            Self::Calibration => "calibration",
            Self::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvictionPolicy {
    /// Context tokens retained per head per chunk under compression.
    pub kv_budget: usize,
    pub lambda_mult: f64,
    pub schedule: LayerSchedule,
    /// `None` means `ceil(w_c / 10)`.
    pub sink_len: Option<usize>,
    pub recency_len: Option<usize>,
}

impl EvictionPolicy {
    pub fn new(n_layers: usize, kv_budget: usize) -> Self {
        Self {
            kv_budget,
            lambda_mult: DEFAULT_LAMBDA_MULT,
            schedule: LayerSchedule::thirds(n_layers),
            sink_len: None,
            recency_len: None,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.kv_budget == 0 {
            return Err(Error::config("kv_budget must be >= 1"));
        }
        if !(self.lambda_mult > 1.0 && self.lambda_mult.is_finite()) {
            return Err(Error::config(format!(
                "lambda_mult must be a finite value > 1, got {}",
                self.lambda_mult
            )));
        }
        self.schedule.validate(n_layers)
    }

    pub fn regions(&self, context_len: usize) -> BiasRegions {
        let default = context_len.div_ceil(10);
        classify_bias_regions(
            context_len,
            self.sink_len.unwrap_or(default),
            self.recency_len.unwrap_or(default),
        )
    }
}

/// Partition of a chunk's context positions into sink / middle / recency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasRegions {
    pub sink: Vec<usize>,
    pub middle: Vec<usize>,
    pub recency: Vec<usize>,
}

impl BiasRegions {
    pub fn region_of(&self, pos: usize) -> BiasRegion {
        let s = self.sink.len();
        let m = self.middle.len();
        if pos < s {
            BiasRegion::Sink
        } else if pos < s + m {
            BiasRegion::Middle
        } else {
            BiasRegion::Recency
        }
    }

    pub fn len(&self) -> usize {
        self.sink.len() + self.middle.len() + self.recency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// First `sink_len` positions are the sink, last `recency_len` the recency
/// region, the rest the middle. If the two overflow `w_c` they are shrunk
/// proportionally: sink gets `floor(w_c * sink / (sink + recency))`, recency
/// the remainder.
pub fn classify_bias_regions(w_c: usize, sink_len: usize, recency_len: usize) -> BiasRegions {
    let (s, r) = if sink_len + recency_len > w_c {
        let s = w_c * sink_len / (sink_len + recency_len);
        (s, w_c - s)
    } else {
        (sink_len, recency_len)
    };
    BiasRegions {
        sink: (0..s).collect(),
        middle: (s..w_c - r).collect(),
        recency: (w_c - r..w_c).collect(),
    }
}

/// `lambda_mult * mean(scores)`. Shared by calibration eviction and outlier
/// counting.
pub fn calibration_threshold(scores: &[f64], lambda_mult: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    lambda_mult * scores.iter().sum::<f64>() / scores.len() as f64
}

/// Indices with score strictly above `threshold`.
pub fn indices_above(scores: &[f64], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Context indices kept by compression: the `min(budget, len)` largest.
pub fn select_low(scores: &[f64], budget: usize) -> Vec<usize> {
    top_k_indices(scores, budget.min(scores.len())).expect("k clamped to length")
}

/// Context indices kept by calibration for one head.
pub fn select_calibrated(
    scores: &[f64],
    regions: &BiasRegions,
    scheduled: &[BiasRegion],
    lambda_mult: f64,
) -> Vec<usize> {
    if scheduled.is_empty() {
        return (0..scores.len()).collect();
    }
    let lambda = calibration_threshold(scores, lambda_mult);
    (0..scores.len())
        .filter(|&j| !(scores[j] > lambda && scheduled.contains(&regions.region_of(j))))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetainedHead {
    pub k: Matrix,
    pub v: Matrix,
    /// Original chunk positions of the rows of `k`/`v`, ascending. The query
    /// positions `w_c..w_c+w_q` are always present at the end.
    pub retained: Vec<usize>,
}

impl RetainedHead {
    pub fn context_rows(&self, context_len: usize) -> usize {
        self.retained.partition_point(|&p| p < context_len)
    }
}

/// A chunk's KV cache after eviction.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedKV {
    pub chunk_index: usize,
    pub context_len: usize,
    pub query_len: usize,
    /// `[layer][head]`
    pub heads: Vec<Vec<RetainedHead>>,
}

impl CompressedKV {
    /// Builds the cache from per-layer per-head retained context indices.
    pub fn from_selection(state: &ChunkState, keep: &[Vec<Vec<usize>>]) -> Result<Self> {
        let mut heads = Vec::with_capacity(state.n_layers());
        for (l, layer) in state.kv.iter().enumerate() {
            let mut hs = Vec::with_capacity(layer.len());
            for (h, kv) in layer.iter().enumerate() {
                let mut retained = keep[l][h].clone();
                debug_assert!(retained.windows(2).all(|w| w[0] < w[1]));
                debug_assert!(retained.last().is_none_or(|&p| p < state.context_len));
                retained.extend(state.context_len..state.total_len());
                hs.push(RetainedHead {
                    k: kv.k.select_rows(&retained)?,
                    v: kv.v.select_rows(&retained)?,
                    retained,
                });
            }
            heads.push(hs);
        }
        Ok(Self {
            chunk_index: state.chunk_index,
            context_len: state.context_len,
            query_len: state.query_len,
            heads,
        })
    }

    pub fn identity(state: &ChunkState) -> Result<Self> {
        let all: Vec<usize> = (0..state.context_len).collect();
        let keep = vec![vec![all; state.n_heads()]; state.n_layers()];
        Self::from_selection(state, &keep)
    }

    pub fn retained_context(&self, layer: usize, head: usize) -> &[usize] {
        let h = &self.heads[layer][head];
        &h.retained[..h.context_rows(self.context_len)]
    }

    /// Retained context rows summed over layers and heads.
    pub fn context_rows_total(&self) -> usize {
        self.heads
            .iter()
            .flatten()
            .map(|h| h.context_rows(self.context_len))
            .sum()
    }

    /// All retained rows (context + query) summed over layers and heads.
    pub fn rows_total(&self) -> usize {
        self.heads.iter().flatten().map(|h| h.retained.len()).sum()
    }
}

fn check_scores(state: &ChunkState, scores: &LayerHeadScores) -> Result<()> {
    let ok = scores.len() == state.n_layers()
        && scores
            .iter()
            .all(|l| l.len() == state.n_heads() && l.iter().all(|s| s.len() == state.context_len));
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: "eviction scores",
            left: (state.n_layers(), state.n_heads()),
            right: (scores.len(), scores.first().map_or(0, Vec::len)),
        })
    }
}

/// Compression eviction: per head, keep the `kv_budget` context tokens with
/// the highest score (ties to the lower index) plus the whole query.
pub fn evict_low(state: &ChunkState, scores: &LayerHeadScores, kv_budget: usize) -> Result<CompressedKV> {
    check_scores(state, scores)?;
    let keep: Vec<Vec<Vec<usize>>> = scores
        .iter()
        .map(|l| l.iter().map(|s| select_low(s, kv_budget)).collect())
        .collect();
    CompressedKV::from_selection(state, &keep)
}

/// Calibration selection for a single layer: retained context indices per
/// head.
pub fn calibrate_layer(
    state: &ChunkState,
    scores: &LayerHeadScores,
    policy: &EvictionPolicy,
    layer: usize,
) -> Result<Vec<Vec<usize>>> {
    check_scores(state, scores)?;
    if layer >= state.n_layers() {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            bound: state.n_layers(),
        });
    }
    let regions = policy.regions(state.context_len);
    let scheduled = policy.schedule.regions_for(layer);
    Ok(scores[layer]
        .iter()
        .map(|s| select_calibrated(s, &regions, &scheduled, policy.lambda_mult))
        .collect())
}

/// Calibration eviction across all layers according to the schedule.
pub fn evict_high_calibration(
    state: &ChunkState,
    scores: &LayerHeadScores,
    policy: &EvictionPolicy,
) -> Result<CompressedKV> {
    let keep = (0..state.n_layers())
        .map(|l| calibrate_layer(state, scores, policy, l))
        .collect::<Result<Vec<_>>>()?;
    CompressedKV::from_selection(state, &keep)
}

/// Runs the configured eviction on the state's own scores. `Both` applies
/// calibration first, then compression over the survivors.
pub fn apply_policy(state: &ChunkState, policy: &EvictionPolicy, mode: EvictionMode) -> Result<CompressedKV> {
    let scores = &state.scores;
    match mode {
        EvictionMode::None => CompressedKV::identity(state),
        EvictionMode::Compression => evict_low(state, scores, policy.kv_budget),
        EvictionMode::Calibration => evict_high_calibration(state, scores, policy),
        EvictionMode::Both => {
            let mut keep = Vec::with_capacity(state.n_layers());
            for l in 0..state.n_layers() {
                let survivors = calibrate_layer(state, scores, policy, l)?;
                keep.push(
                    survivors
                        .into_iter()
                        .zip(&scores[l])
                        .map(|(idx, s)| {
                            let sub: Vec<f64> = idx.iter().map(|&j| s[j]).collect();
                            select_low(&sub, policy.kv_budget)
                                .into_iter()
                                .map(|k| idx[k])
                                .collect()
                        })
                        .collect(),
                );
            }
            CompressedKV::from_selection(state, &keep)
        }
    }
}
