//! A small pre-norm decoder transformer with rotary positions.
//!
//! Each block is `x += Attn(norm(x)); x += FF(norm(x))` with RMS
//! normalization (no gain), causal multi-head softmax attention, and a SiLU
//! feed-forward. Weights come from [`ModelWeights`]; [`Model`] adds the rotary
//! table and the instrumentation counters shared by every attention path.

mod io;
mod rope;
mod weights;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

pub use io::{read_weights, write_weights, WEIGHT_MAGIC};
pub use rope::{RopeTable, DEFAULT_ROPE_BASE};
pub use weights::{LayerWeights, ModelConfig, ModelWeights};

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, softmax_in_place, Matrix};

pub type TokenId = u32;

const RMS_EPS: f64 = 1e-6;

/// Exact tallies gathered on the attention path.
#[derive(Debug, Default)]
pub struct Counters {
    score_pairs: AtomicU64,
    rope_rows: AtomicU64,
    /// One past the largest rotary position ever requested, 0 if none.
    position_high_water: AtomicUsize,
}

impl Counters {
    /// Number of query-key dot products evaluated so far.
    pub fn score_pairs(&self) -> u64 {
        self.score_pairs.load(Ordering::Relaxed)
    }

    pub fn rope_rows(&self) -> u64 {
        self.rope_rows.load(Ordering::Relaxed)
    }

    /// Largest rotary position requested so far, successful or not.
    pub fn max_position(&self) -> Option<usize> {
        match self.position_high_water.load(Ordering::Relaxed) {
            0 => None,
            p => Some(p - 1),
        }
    }

    pub fn reset(&self) {
        self.score_pairs.store(0, Ordering::Relaxed);
        self.rope_rows.store(0, Ordering::Relaxed);
        self.position_high_water.store(0, Ordering::Relaxed);
    }

    fn add_pairs(&self, n: usize) {
        self.score_pairs.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn note_positions(&self, positions: &[usize]) {
        self.rope_rows
            .fetch_add(positions.len() as u64, Ordering::Relaxed);
        if let Some(&m) = positions.iter().max() {
            self.position_high_water.fetch_max(m + 1, Ordering::Relaxed);
        }
    }
}

/// Rotated keys and raw values of one head, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadKv {
    pub k: Matrix,
    pub v: Matrix,
}

/// Everything a causal pass over one token window produces.
#[derive(Debug, Clone)]
pub struct LocalForward {
    /// `[layer][head]`
    pub kv: Vec<Vec<HeadKv>>,
    /// `[layer][head]`, lower-triangular `tokens x tokens`.
    pub attention: Vec<Vec<Matrix>>,
    /// `tokens x vocab_size`
    pub logits: Matrix,
}

#[derive(Debug)]
pub struct Model {
    weights: ModelWeights,
    rope: RopeTable,
    counters: Counters,
}

impl Model {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        weights.validate()?;
        let cfg = weights.config;
        Ok(Self {
            rope: RopeTable::new(cfg.max_train_positions, cfg.d_head, DEFAULT_ROPE_BASE),
            weights,
            counters: Counters::default(),
        })
    }

    pub fn from_seed(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(ModelWeights::init_from_seed(cfg, seed)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Rotates `x` (tokens x d_head) by per-row positions. Every rotary call
    /// in the crate goes through here so the position high-water mark is
    /// complete.
    pub fn apply_rope(&self, x: &Matrix, positions: &[usize]) -> Result<Matrix> {
        self.counters.note_positions(positions);
        self.rope.apply(x, positions)
    }

    pub(crate) fn embed(&self, tokens: &[TokenId]) -> Result<Matrix> {
        let cfg = self.config();
        let mut x = Matrix::zeros(tokens.len(), cfg.d_model);
        for (r, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= cfg.vocab_size {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: t,
                    bound: cfg.vocab_size,
                });
            }
            x.row_mut(r).copy_from_slice(self.weights.token_embedding.row(t));
        }
        Ok(x)
    }

    /// Per-head rotated queries, rotated keys, and values for one layer.
    pub(crate) fn project_qkv(
        &self,
        layer: usize,
        normed: &Matrix,
        positions: &[usize],
    ) -> Result<(Vec<Matrix>, Vec<Matrix>, Vec<Matrix>)> {
        let cfg = self.config();
        let lw = &self.weights.layers[layer];
        let q = matmul(normed, &lw.w_q)?;
        let k = matmul(normed, &lw.w_k)?;
        let v = matmul(normed, &lw.w_v)?;
        let mut qs = Vec::with_capacity(cfg.n_heads);
        let mut ks = Vec::with_capacity(cfg.n_heads);
        let mut vs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let band = h * cfg.d_head..(h + 1) * cfg.d_head;
            qs.push(self.apply_rope(&q.column_band(band.clone()), positions)?);
            ks.push(self.apply_rope(&k.column_band(band.clone()), positions)?);
            vs.push(v.column_band(band));
        }
        Ok((qs, ks, vs))
    }

    /// Softmax attention of one query row over the first `visible` cached
    /// rows. Writes the weights into `weights_out` and returns the mixed value.
    pub(crate) fn attend_row(
        &self,
        query: &[f64],
        keys: &Matrix,
        values: &Matrix,
        visible: usize,
        weights_out: &mut [f64],
    ) -> Vec<f64> {
        debug_assert!(visible <= keys.rows() && weights_out.len() == visible);
        for (j, w) in weights_out.iter_mut().enumerate() {
            *w = dot(query, keys.row(j));
        }
        self.counters.add_pairs(visible);
        let scale = 1.0 / (self.config().d_head as f64).sqrt();
        let ok = softmax_in_place(weights_out, scale);
        debug_assert!(ok, "attention logits must be finite");
        let mut out = vec![0.0; values.cols()];
        for (j, &a) in weights_out.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(values.row(j)) {
                *o += a * x;
            }
        }
        out
    }

    pub(crate) fn output_projection(&self, layer: usize, heads: &[Matrix]) -> Result<Matrix> {
        let cfg = self.config();
        let rows = heads.first().map_or(0, Matrix::rows);
        let mut merged = Matrix::zeros(rows, cfg.d_model);
        for (h, m) in heads.iter().enumerate() {
            merged.set_column_band(h * cfg.d_head, m);
        }
        matmul(&merged, &self.weights.layers[layer].w_o)
    }

    /// `x += FF(norm(x))`
    pub(crate) fn feed_forward(&self, layer: usize, x: &mut Matrix) -> Result<()> {
        let lw = &self.weights.layers[layer];
        let mut hidden = matmul(&rms_norm(x), &lw.ff_up)?;
        for h in hidden.data_mut() {
            *h = silu(*h);
        }
        let out = matmul(&hidden, &lw.ff_down)?;
        add_in_place(x, &out);
        Ok(())
    }

    pub(crate) fn lm_logits(&self, x: &Matrix) -> Result<Matrix> {
        matmul(&rms_norm(x), &self.weights.lm_head)
    }

    /// Causal forward pass over one window of tokens at the given positions.
    pub fn forward_local(&self, tokens: &[TokenId], positions: &[usize]) -> Result<LocalForward> {
        let cfg = *self.config();
        if tokens.is_empty() {
            return Err(Error::Empty("forward_local"));
        }
        if tokens.len() != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "forward_local",
                left: (tokens.len(), 1),
                right: (positions.len(), 1),
            });
        }
        if tokens.len() > cfg.max_train_positions {
            return Err(Error::PositionOverflow {
                position: tokens.len() - 1,
                budget: cfg.max_train_positions,
            });
        }
        let n = tokens.len();
        let mut x = self.embed(tokens)?;
        let mut kv = Vec::with_capacity(cfg.n_layers);
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let normed = rms_norm(&x);
            let (qs, ks, vs) = self.project_qkv(layer, &normed, positions)?;
            let mut head_out = Vec::with_capacity(cfg.n_heads);
            let mut head_attn = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let mut a = Matrix::zeros(n, n);
                let mut o = Matrix::zeros(n, cfg.d_head);
                for i in 0..n {
                    let mixed =
                        self.attend_row(qs[h].row(i), &ks[h], &vs[h], i + 1, &mut a.row_mut(i)[..=i]);
                    o.row_mut(i).copy_from_slice(&mixed);
                }
                head_out.push(o);
                head_attn.push(a);
            }
            let attn = self.output_projection(layer, &head_out)?;
            add_in_place(&mut x, &attn);
            self.feed_forward(layer, &mut x)?;
            kv.push(
                ks.into_iter()
                    .zip(vs)
                    .map(|(k, v)| HeadKv { k, v })
                    .collect(),
            );
            attention.push(head_attn);
        }
        let logits = self.lm_logits(&x)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("forward_local logits"));
        }
        Ok(LocalForward {
            kv,
            attention,
            logits,
        })
    }
}

pub(crate) fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub(crate) fn add_in_place(x: &mut Matrix, delta: &Matrix) {
    for (a, b) in x.data_mut().iter_mut().zip(delta.data()) {
        *a += b;
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}
